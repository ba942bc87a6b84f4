//! Measurements behind the kernel, gradient, transport and schedule
//! checks. Integration tests assert on them and the acceptance binary
//! prints them.

use std::time::Instant;

use schedrl::flow::{draw_fm_batch, fm_loss, fm_loss_value, init_field_net, TargetSpec, VelocityField};
use schedrl::rl::{discounted_reward, ppo_loss, rloo_advantages, rollout_group, Environment, PpoSample, RLConfig};
use schedrl::sampler::{sample_adaptive, sample_fixed, ScheduleConfig, ScheduleMode};
use schedrl::special_math::{beta_kl, beta_log_pdf, digamma, log_gamma, BetaParams, RngStream};
use schedrl::tensor_nn::DenseNet;
use schedrl::tpm::{init_policy, log_prob_grad_raw, tpm_params, StepFeatures, TimePolicy};

use super::{fd_grad, integrate, rel_err};

/// mpmath at 40 digits, evaluated at the exact binary value of each argument.
#[allow(clippy::excessive_precision)]
pub const DIGAMMA_REF: [(f64, f64); 10] = [
    (0.1, -10.423754940411076232),
    (0.75, -1.0858608797864721696),
    (1.5, 0.036489973978576520559),
    (2.25, 0.57254646662373459191),
    (3.3, 1.0348224890596216863),
    (7.9, 2.0022384875635710357),
    (13.0, 2.5259950133091453501),
    (42.5, 3.7376932365000936171),
    (250.0, 5.519459584531046417),
    (12345.6, 9.4210145024653966236),
];
#[allow(clippy::excessive_precision)]
pub const LOG_GAMMA_REF: [(f64, f64); 10] = [
    (0.1, 2.252712651734205902),
    (0.75, 0.20328095143129537148),
    (1.5, -0.12078223763524522235),
    (2.25, 0.1248717148923965943),
    (3.3, 0.98709857789473440406),
    (7.9, 8.3242658680088096349),
    (13.0, 19.98721449566188615),
    (42.5, 115.90007047041453012),
    (250.0, 1128.5237708729907142),
    (12345.6, 103959.18506616845901),
];

/// Bit patterns of every reported number, for rerun comparisons.
pub type Fingerprint = Vec<u64>;

fn bits(xs: &[f64]) -> Fingerprint {
    xs.iter().map(|x| x.to_bits()).collect()
}

const BETA_SHAPES: [(f64, f64); 5] = [(1.05, 30.0), (2.0, 2.0), (3.7, 1.9), (50.0, 80.0), (12.0, 1.3)];

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub normalization_err: f64,
    pub kl_err: f64,
    pub digamma_err: f64,
    pub log_gamma_err: f64,
    pub rloo_sum: f64,
    pub discount_gamma_one_exact: bool,
    pub discount_single_step_exact: bool,
    pub discount_geometric_err: f64,
    pub seconds: f64,
}

impl KernelReport {
    pub fn passes(&self) -> bool {
        self.normalization_err <= 1e-8
            && self.kl_err <= 1e-6
            && self.digamma_err <= 1e-9
            && self.log_gamma_err <= 1e-10
            && self.rloo_sum <= 1e-12
            && self.discount_gamma_one_exact
            && self.discount_single_step_exact
            && self.discount_geometric_err <= 1e-15
            && self.seconds <= 10.0
    }

    pub fn fingerprint(&self) -> Fingerprint {
        bits(&[
            self.normalization_err,
            self.kl_err,
            self.digamma_err,
            self.log_gamma_err,
            self.rloo_sum,
            self.discount_geometric_err,
        ])
    }
}

pub fn kernel_suite() -> KernelReport {
    let start = Instant::now();
    let mut normalization_err: f64 = 0.0;
    let mut kl_err: f64 = 0.0;
    for (a, b) in BETA_SHAPES {
        let p = BetaParams::new(a, b).unwrap();
        let dens = |r: f64| if r <= 0.0 || r >= 1.0 { 0.0 } else { beta_log_pdf(r, &p).unwrap().exp() };
        normalization_err = normalization_err.max((integrate(&dens, 0.0, 1.0, 1e-12) - 1.0).abs());
        for (c, d) in BETA_SHAPES {
            let q = BetaParams::new(c, d).unwrap();
            let f = |r: f64| {
                if r <= 0.0 || r >= 1.0 {
                    return 0.0;
                }
                let lp = beta_log_pdf(r, &p).unwrap();
                let w = lp.exp();
                if w == 0.0 {
                    0.0
                } else {
                    w * (lp - beta_log_pdf(r, &q).unwrap())
                }
            };
            kl_err = kl_err.max((beta_kl(&p, &q) - integrate(&f, 0.0, 1.0, 1e-11)).abs());
        }
    }
    let digamma_err = DIGAMMA_REF.iter().map(|&(x, v)| (digamma(x).unwrap() - v).abs()).fold(0.0, f64::max);
    let log_gamma_err = LOG_GAMMA_REF.iter().map(|&(x, v)| (log_gamma(x).unwrap() - v).abs()).fold(0.0, f64::max);
    let mut rng = RngStream::new(2024, 1);
    let mut rloo_sum: f64 = 0.0;
    for _ in 0..2000 {
        let k = 2 + rng.index(15);
        let r: Vec<f64> = (0..k).map(|_| 12.0 * rng.uniform() - 10.0).collect();
        rloo_sum = rloo_sum.max(rloo_advantages(&r).unwrap().iter().sum::<f64>().abs());
    }
    let mut gamma_one = true;
    let mut single = true;
    for _ in 0..200 {
        let ir = 4.0 * rng.uniform() - 2.0;
        let n = 1 + rng.index(40);
        gamma_one &= discounted_reward(ir, n, 1.0).unwrap() == ir;
        single &= discounted_reward(ir, 1, 0.05 + 0.9 * rng.uniform()).unwrap() == ir;
    }
    let discount_geometric_err = (discounted_reward(1.0, 3, 0.9).unwrap() - 2.71 / 3.0).abs();
    KernelReport {
        normalization_err,
        kl_err,
        digamma_err,
        log_gamma_err,
        rloo_sum,
        discount_gamma_one_exact: gamma_one,
        discount_single_step_exact: single,
        discount_geometric_err,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub network: f64,
    pub fm_loss: f64,
    pub log_prob_chain: f64,
    pub ppo_loss: f64,
    pub seconds: f64,
}

impl GradientReport {
    pub fn passes(&self) -> bool {
        self.network <= 1e-4
            && self.fm_loss <= 1e-4
            && self.log_prob_chain <= 1e-4
            && self.ppo_loss <= 1e-3
            && self.seconds <= 60.0
    }

    pub fn fingerprint(&self) -> Fingerprint {
        bits(&[self.network, self.fm_loss, self.log_prob_chain, self.ppo_loss])
    }
}

fn with_params(net: &DenseNet, p: &[f64]) -> DenseNet {
    DenseNet::from_params(net.sizes(), p.to_vec()).unwrap()
}

/// Worst relative error of parameter and input gradients of `g · net(x)`.
pub fn network_gradient_error(net: &DenseNet, rng: &mut RngStream) -> f64 {
    let x: Vec<f64> = (0..net.input_dim()).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let g: Vec<f64> = (0..net.output_dim()).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let dot = |out: Vec<f64>| out.iter().zip(&g).map(|(o, w)| o * w).sum::<f64>();
    let grads = net.backward(&x, &g).unwrap();
    let fd_p = fd_grad(&|p| dot(with_params(net, p).forward(&x).unwrap()), net.params(), 1e-6);
    let fd_x = fd_grad(&|xi| dot(net.forward(xi).unwrap()), &x, 1e-6);
    rel_err(&grads.params, &fd_p).max(rel_err(&grads.input, &fd_x))
}

pub fn policy_with_noise(dim: usize, r: f64, hidden: &[usize], scale: f64, rng: &mut RngStream) -> TimePolicy {
    let mut pol = init_policy(dim, r, hidden, rng).unwrap();
    for p in pol.net_mut().params_mut() {
        *p += scale * (2.0 * rng.uniform() - 1.0);
    }
    pol
}

fn policy_from(base: &TimePolicy, params: &[f64]) -> TimePolicy {
    TimePolicy::new(with_params(base.net(), params), base.dim()).unwrap()
}

pub fn gradient_suite() -> GradientReport {
    let start = Instant::now();
    let mut rng = RngStream::new(31, 7);

    let mut network = network_gradient_error(&DenseNet::random(&[2, 16, 16, 2], &mut rng).unwrap(), &mut rng);
    for _ in 0..10 {
        let depth = 1 + rng.index(3);
        let mut sizes = vec![1 + rng.index(6)];
        sizes.extend((0..depth).map(|_| 1 + rng.index(12)));
        sizes.push(1 + rng.index(4));
        let mut net = DenseNet::random(&sizes, &mut rng).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * (2.0 * rng.uniform() - 1.0);
        }
        network = network.max(network_gradient_error(&net, &mut rng));
    }

    let target = TargetSpec::ring(2, 3, 1.5, 0.4).unwrap();
    let net = init_field_net(2, &[16, 16], &mut rng).unwrap();
    let batch = draw_fm_batch(&target, 8, &mut rng);
    let (_, g) = fm_loss(&net, &batch).unwrap();
    let fd = fd_grad(
        &|p| fm_loss_value(&VelocityField::learned(with_params(&net, p)).unwrap(), &batch).unwrap(),
        net.params(),
        1e-6,
    );
    let fm = rel_err(&g, &fd);

    let mut log_prob_chain: f64 = 0.0;
    for _ in 0..5 {
        let pol = policy_with_noise(2, 0.7, &[8, 8], 0.3, &mut rng);
        let x = rng.normal_vec(2);
        let v = rng.normal_vec(2);
        let feats = StepFeatures::new(&x, &v, 0.05 + 0.9 * rng.uniform()).unwrap();
        let r = 0.05 + 0.9 * rng.uniform();
        let acts = pol.net().forward_cached(feats.as_slice()).unwrap();
        let (a, b) = (acts.output()[0], acts.output()[1]);
        let (ga, gb) = log_prob_grad_raw(r, a, b);
        let mut g = vec![0.0; pol.net().num_params()];
        pol.net().backward_cached(&acts, &[ga, gb], &mut g).unwrap();
        let fd = fd_grad(
            &|p| beta_log_pdf(r, &tpm_params(&policy_from(&pol, p), &feats).unwrap()).unwrap(),
            pol.net().params(),
            1e-6,
        );
        log_prob_chain = log_prob_chain.max(rel_err(&g, &fd));
    }

    GradientReport {
        network,
        fm_loss: fm,
        log_prob_chain,
        ppo_loss: ppo_gradient_error(&mut rng),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Two trajectories from one group; the current policy differs from both
/// the sampling and the reference policy so every loss term is active.
pub fn ppo_gradient_error(rng: &mut RngStream) -> f64 {
    let target = TargetSpec::standard_normal(2);
    let env = Environment::new(
        vec![target.clone()],
        vec![VelocityField::oracle(target).unwrap()],
        ScheduleConfig::default(),
        1000,
        5,
    )
    .unwrap();
    let reference = init_policy(2, 0.6, &[8], rng).unwrap();
    let old = policy_with_noise(2, 0.6, &[8], 0.05, rng);
    let group = rollout_group(&old, &reference, &env, 0, 2, 0.95, &rng.fork(&[1])).unwrap();
    let mut current = old.clone();
    for p in current.net_mut().params_mut() {
        *p += 0.01 * (2.0 * rng.uniform() - 1.0);
    }
    let advantages = [0.7, -0.4];
    let samples: Vec<PpoSample<'_>> =
        group.samples().zip(advantages).map(|(s, a)| PpoSample { advantage: a, ..s }).collect();
    let mut worst: f64 = 0.0;
    for clip in [0.0, 0.2, 0.005] {
        let cfg = RLConfig { clip, kl_weight: 0.3, ..RLConfig::default() };
        let out = ppo_loss(&current, &samples, &cfg).unwrap();
        let fd = fd_grad(
            &|p| ppo_loss(&policy_from(&current, p), &samples, &cfg).unwrap().loss,
            current.net().params(),
            1e-6,
        );
        worst = worst.max(rel_err(&out.grads, &fd));
    }
    worst
}

#[derive(Debug, Clone)]
pub struct TransportReport {
    pub mean_norm: f64,
    pub variance: [f64; 2],
    pub discrete_mean_gap: f64,
    pub seconds: f64,
}

impl TransportReport {
    pub fn passes(&self) -> bool {
        self.mean_norm <= 0.05
            && self.variance.iter().all(|v| (0.9..=1.1).contains(v))
            && self.discrete_mean_gap <= 0.01
            && self.seconds <= 60.0
    }

    pub fn fingerprint(&self) -> Fingerprint {
        bits(&[self.mean_norm, self.variance[0], self.variance[1], self.discrete_mean_gap])
    }
}

fn axis_moments(samples: &[Vec<f64>]) -> ([f64; 2], [f64; 2]) {
    let n = samples.len() as f64;
    let mut mean = [0.0; 2];
    for s in samples {
        mean[0] += s[0] / n;
        mean[1] += s[1] / n;
    }
    let mut var = [0.0; 2];
    for s in samples {
        var[0] += (s[0] - mean[0]).powi(2) / (n - 1.0);
        var[1] += (s[1] - mean[1]).powi(2) / (n - 1.0);
    }
    (mean, var)
}

pub fn transport_suite() -> TransportReport {
    let start = Instant::now();
    let target = TargetSpec::standard_normal(2);
    let field = VelocityField::oracle(target.clone()).unwrap();
    let fixed = ScheduleConfig { mode: ScheduleMode::FixedUniform, fixed_n: 200, ..ScheduleConfig::default() };
    let ys: Vec<Vec<f64>> = (0..10_000)
        .map(|i| {
            let t = sample_fixed(&field, &target, &fixed, &mut RngStream::new(77, i)).unwrap();
            t.final_sample().to_vec()
        })
        .collect();
    let (mean, variance) = axis_moments(&ys);

    let policy = init_policy(2, 0.75, &[8], &mut RngStream::new(3, 0)).unwrap();
    let cont = ScheduleConfig::default();
    let disc = ScheduleConfig { mode: ScheduleMode::DiscreteAdaptive, grid_size: 1000, ..ScheduleConfig::default() };
    let run = |cfg: &ScheduleConfig| -> Vec<Vec<f64>> {
        (0..10_000)
            .map(|i| {
                sample_adaptive(&policy, &field, &target, cfg, &mut RngStream::new(78, i))
                    .unwrap()
                    .final_sample()
                    .to_vec()
            })
            .collect()
    };
    let (mc, _) = axis_moments(&run(&cont));
    let (md, _) = axis_moments(&run(&disc));
    TransportReport {
        mean_norm: mean[0].hypot(mean[1]),
        variance,
        discrete_mean_gap: (mc[0] - md[0]).abs().max((mc[1] - md[1]).abs()),
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub rollouts: usize,
    pub violations: usize,
    pub mean_steps: f64,
    pub seconds: f64,
}

impl ScheduleReport {
    pub fn passes(&self) -> bool {
        self.rollouts == 10_000 && self.violations == 0 && self.seconds <= 60.0
    }

    pub fn fingerprint(&self) -> Fingerprint {
        vec![self.rollouts as u64, self.violations as u64, self.mean_steps.to_bits()]
    }
}

/// Rollouts under a state-dependent policy; counts schedules that are not
/// strictly decreasing from 1 to 0 within the cap, or that used a law with
/// a shape parameter at or below 1.
pub fn schedule_suite() -> ScheduleReport {
    let start = Instant::now();
    let target = TargetSpec::ring(2, 4, 2.0, 0.5).unwrap();
    let field = VelocityField::learned(init_field_net(2, &[16], &mut RngStream::new(4, 4)).unwrap()).unwrap();
    let policy = policy_with_noise(2, 0.75, &[16, 16], 0.5, &mut RngStream::new(4, 5));
    let cfg = ScheduleConfig::default();
    let mut violations = 0;
    let mut steps = 0usize;
    for i in 0..10_000 {
        let t = sample_adaptive(&policy, &field, &target, &cfg, &mut RngStream::new(79, i)).unwrap();
        let decreasing = t.times.windows(2).all(|w| w[1] < w[0]);
        let ends = t.times[0] == 1.0 && *t.times.last().unwrap() == 0.0;
        let capped = t.steps() <= cfg.n_max;
        let shapes = t.step_params.iter().all(|p| p.alpha() > 1.0 && p.beta() > 1.0);
        if !(decreasing && ends && capped && shapes && t.validate().is_ok()) {
            violations += 1;
        }
        steps += t.steps();
    }
    ScheduleReport {
        rollouts: 10_000,
        violations,
        mean_steps: steps as f64 / 10_000.0,
        seconds: start.elapsed().as_secs_f64(),
    }
}
