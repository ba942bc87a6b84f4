//! Reward, step discounting, leave-one-out advantages and the PPO trainer
//! for the time policy. The velocity field stays frozen throughout.
//!
//! A whole trajectory is one action: its log-probability is the sum of the
//! recorded per-step Beta log-densities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::flow::{interpolate, TargetSpec, VelocityField};
use crate::sampler::{sample_adaptive_from, ScheduleConfig, Trajectory};
use crate::special_math::{beta_kl, beta_kl_grad_q, beta_log_pdf, BetaParams, RngStream};
use crate::tensor_nn::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState};
use crate::tpm::{log_prob_grad_raw, shapes_from_raw, shapes_jacobian, tpm_params, StepFeatures, TimePolicy};

/// Lower clamp on the quality reward.
pub const REWARD_FLOOR: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    pub gamma: f64,
    pub kl_weight: f64,
    /// PPO ratio clip; 0 disables clipping.
    pub clip: f64,
    pub group_size: usize,
    /// Trajectories per outer step.
    pub batch: usize,
    pub inner_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub outer_steps: usize,
    /// Monte-Carlo samples used to freeze each target's reference log-density.
    pub reward_ref_samples: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            kl_weight: 0.01,
            clip: 0.2,
            group_size: 4,
            batch: 256,
            inner_epochs: 4,
            lr: 1e-5,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            outer_steps: 200,
            reward_ref_samples: 100_000,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err("gamma must lie in (0, 1]");
        }
        if !(self.kl_weight >= 0.0) {
            return err("kl_weight must be non-negative");
        }
        if !(self.clip >= 0.0) {
            return err("clip must be non-negative");
        }
        if self.group_size < 2 {
            return err("group_size must be at least 2");
        }
        if self.batch < self.group_size || !self.batch.is_multiple_of(self.group_size) {
            return err("batch must be a positive multiple of group_size");
        }
        if self.inner_epochs == 0 || self.outer_steps == 0 {
            return err("inner_epochs and outer_steps must be positive");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return err("lr and max_grad_norm must be positive");
        }
        if self.reward_ref_samples == 0 {
            return err("reward_ref_samples must be positive");
        }
        Ok(())
    }

    pub fn groups_per_step(&self) -> usize {
        self.batch / self.group_size
    }
}

/// Closed-form quality score of a final sample: the target log-density
/// centred on its expectation under the target, floored at [`REWARD_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyReward {
    target: TargetSpec,
    reference: f64,
    scale: f64,
}

impl ToyReward {
    /// Freezes the reference level from `samples` Monte-Carlo draws.
    pub fn new(target: TargetSpec, samples: usize, rng: &mut RngStream) -> Self {
        let reference = target.expected_log_density(samples, rng);
        Self::with_reference(target, reference)
    }

    pub fn with_reference(target: TargetSpec, reference: f64) -> Self {
        Self { target, reference, scale: 1.0 }
    }

    pub fn reference(&self) -> f64 {
        self.reference
    }

    pub fn target(&self) -> &TargetSpec {
        &self.target
    }

    pub fn score(&self, y: &[f64]) -> f64 {
        toy_reward(y, &self.target, self.reference, self.scale)
    }
}

/// `max((log p(y) − reference) / scale, REWARD_FLOOR)`.
pub fn toy_reward(y: &[f64], target: &TargetSpec, reference: f64, scale: f64) -> f64 {
    let ir = (target.log_density(y) - reference) / scale;
    if ir.is_nan() {
        REWARD_FLOOR
    } else {
        ir.max(REWARD_FLOOR)
    }
}

/// `ir · (1/N) · Σ_{n=1..N} γ^{N−n}`.
pub fn discounted_reward(ir: f64, steps: usize, gamma: f64) -> Result<f64> {
    if steps == 0 {
        return Err(domain("discounting needs at least one step"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(domain(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let mut sum = 0.0;
    let mut w = 1.0;
    for _ in 0..steps {
        sum += w;
        w *= gamma;
    }
    Ok(ir * (sum / steps as f64))
}

/// `Â_i = R_i − mean_{j≠i} R_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(domain("leave-one-out advantages need at least two rewards"));
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|r| r - (total - r) / (k - 1) as f64).collect())
}

/// Quality, discounted reward and advantage for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRecord {
    pub ir: f64,
    pub discounted: f64,
    pub advantage: f64,
    pub steps: usize,
}

/// Sum of the policy's log-densities at the recorded decay rates.
pub fn traj_log_prob(policy: &TimePolicy, traj: &Trajectory) -> Result<f64> {
    traj.step_features.iter().zip(&traj.decay_rates).map(|(f, &r)| beta_log_pdf(r, &tpm_params(policy, f)?)).sum()
}

/// `k` trajectories sharing one target and one initial noise draw.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub target_index: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardRecord>,
    /// Reference-policy laws at every recorded step of every trajectory.
    pub ref_params: Vec<Vec<BetaParams>>,
}

impl RolloutGroup {
    pub fn samples(&self) -> impl Iterator<Item = PpoSample<'_>> {
        self.trajectories.iter().zip(&self.rewards).zip(&self.ref_params).map(|((t, rw), rp)| PpoSample {
            features: &t.step_features,
            rates: &t.decay_rates,
            old_log_prob: t.log_prob(),
            advantage: rw.advantage,
            ref_params: rp,
        })
    }
}

/// What the PPO loss needs from one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct PpoSample<'a> {
    pub features: &'a [StepFeatures],
    pub rates: &'a [f64],
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ref_params: &'a [BetaParams],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Mean over trajectories of the per-step-averaged `KL[π_ref, π_θ]`.
    pub mean_kl: f64,
    pub dropped: usize,
}

struct SampleTerms {
    objective: f64,
    kl: f64,
    has_steps: bool,
    grads: Vec<f64>,
}

fn sample_terms(policy: &TimePolicy, s: &PpoSample<'_>, cfg: &RLConfig) -> Result<Option<SampleTerms>> {
    let net = policy.net();
    let m = s.features.len();
    check_len(m, s.rates.len())?;
    check_len(m, s.ref_params.len())?;
    let mut acts = Vec::with_capacity(m);
    let mut log_prob = 0.0;
    let mut kl_sum = 0.0;
    let mut lp_grads = Vec::with_capacity(m);
    let mut kl_grads = Vec::with_capacity(m);
    for ((f, &r), ref_p) in s.features.iter().zip(s.rates).zip(s.ref_params) {
        let a = net.forward_cached(f.as_slice())?;
        let (ra, rb) = (a.output()[0], a.output()[1]);
        let p = shapes_from_raw(ra, rb);
        log_prob += beta_log_pdf(r, &p)?;
        kl_sum += beta_kl(ref_p, &p);
        lp_grads.push(log_prob_grad_raw(r, ra, rb));
        let (ka, kb) = beta_kl_grad_q(ref_p, &p);
        let (ja, jb) = shapes_jacobian(ra, rb);
        kl_grads.push((ka * ja, kb * jb));
        acts.push(a);
    }
    let ratio = (log_prob - s.old_log_prob).exp();
    if !ratio.is_finite() {
        return Ok(None);
    }
    let adv = s.advantage;
    let unclipped = ratio * adv;
    let (surrogate, active) = if cfg.clip > 0.0 {
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
        if clipped < unclipped {
            (clipped, false)
        } else {
            (unclipped, true)
        }
    } else {
        (unclipped, true)
    };
    let kl = if m > 0 { kl_sum / m as f64 } else { 0.0 };
    let objective = surrogate - cfg.kl_weight * kl;
    // d objective / d raw outputs, per step.
    let lp_coef = if active { unclipped } else { 0.0 };
    let kl_coef = if m > 0 { cfg.kl_weight / m as f64 } else { 0.0 };
    let mut grads = vec![0.0; net.num_params()];
    for ((a, lg), kg) in acts.iter().zip(&lp_grads).zip(&kl_grads) {
        let og = [lp_coef * lg.0 - kl_coef * kg.0, lp_coef * lg.1 - kl_coef * kg.1];
        net.backward_cached(a, &og, &mut grads)?;
    }
    Ok(Some(SampleTerms { objective, kl, has_steps: m > 0, grads }))
}

/// Trajectory-level PPO loss `−mean[surrogate − λ·KL]` and its gradient with
/// respect to the policy parameters.
pub fn ppo_loss(policy: &TimePolicy, samples: &[PpoSample<'_>], cfg: &RLConfig) -> Result<PpoOutput> {
    if samples.is_empty() {
        return Err(Error::Empty("PPO batch".into()));
    }
    let terms: Vec<Result<Option<SampleTerms>>> = samples.par_iter().map(|s| sample_terms(policy, s, cfg)).collect();
    let mut kept = 0usize;
    let mut dropped = 0usize;
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut kl_count = 0usize;
    let mut grads = vec![0.0; policy.net().num_params()];
    for t in terms {
        match t? {
            Some(t) => {
                kept += 1;
                objective += t.objective;
                if t.has_steps {
                    kl_total += t.kl;
                    kl_count += 1;
                }
                grads.iter_mut().zip(&t.grads).for_each(|(g, d)| *g += d);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} trajectories with non-finite importance ratios");
    }
    if kept == 0 {
        return Err(Error::NonFinite("every importance ratio was non-finite".into()));
    }
    let scale = -1.0 / kept as f64;
    grads.iter_mut().for_each(|g| *g *= scale);
    Ok(PpoOutput {
        loss: objective * scale,
        grads,
        mean_kl: if kl_count > 0 { kl_total / kl_count as f64 } else { 0.0 },
        dropped,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub outer_step: usize,
    pub mean_reward: f64,
    pub mean_ir: f64,
    #[serde(rename = "mean_N")]
    pub mean_n: f64,
    pub mean_kl: f64,
    pub grad_norm: f64,
}

/// Frozen generation environment: one field and one reward per target.
#[derive(Debug, Clone)]
pub struct Environment {
    pub targets: Vec<TargetSpec>,
    pub fields: Vec<VelocityField>,
    pub rewards: Vec<ToyReward>,
    pub schedule: ScheduleConfig,
}

impl Environment {
    /// Builds rewards with frozen reference levels, one RNG stream per target.
    pub fn new(
        targets: Vec<TargetSpec>,
        fields: Vec<VelocityField>,
        schedule: ScheduleConfig,
        ref_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config("at least one target is required".into()));
        }
        check_len(targets.len(), fields.len())?;
        for (t, f) in targets.iter().zip(&fields) {
            check_len(t.dim(), f.dim())?;
        }
        schedule.validate()?;
        let rewards = targets
            .iter()
            .enumerate()
            .map(|(i, t)| ToyReward::new(t.clone(), ref_samples, &mut RngStream::new(seed, REWARD_STREAM ^ i as u64)))
            .collect();
        Ok(Self { targets, fields, rewards, schedule })
    }

    pub fn dim(&self) -> usize {
        self.targets[0].dim()
    }
}

const REWARD_STREAM: u64 = 0x5EED_0000_0000_0001;
const ROLLOUT_STREAM: u64 = 0x5EED_0000_0000_0002;
const NAIVE_STREAM: u64 = 0x5EED_0000_0000_0003;

/// Samples one group of `k` trajectories from a shared initial state.
pub fn rollout_group(
    policy: &TimePolicy,
    reference: &TimePolicy,
    env: &Environment,
    target_index: usize,
    k: usize,
    gamma: f64,
    rng: &RngStream,
) -> Result<RolloutGroup> {
    let mut noise_rng = rng.fork(&[u64::MAX]);
    let x0 = noise_rng.normal_vec(env.dim());
    let field = &env.fields[target_index];
    let mut trajectories = Vec::with_capacity(k);
    for j in 0..k {
        let mut traj_rng = rng.fork(&[j as u64]);
        trajectories.push(sample_adaptive_from(policy, field, &env.schedule, x0.clone(), &mut traj_rng)?);
    }
    let reward = &env.rewards[target_index];
    let mut records = Vec::with_capacity(k);
    for t in &trajectories {
        let ir = reward.score(t.final_sample());
        let discounted = discounted_reward(ir, t.steps(), gamma)?;
        records.push(RewardRecord { ir, discounted, advantage: 0.0, steps: t.steps() });
    }
    let adv = rloo_advantages(&records.iter().map(|r| r.discounted).collect::<Vec<_>>())?;
    records.iter_mut().zip(adv).for_each(|(r, a)| r.advantage = a);
    let ref_params = trajectories
        .iter()
        .map(|t| t.step_features.iter().map(|f| tpm_params(reference, f)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup { target_index, trajectories, rewards: records, ref_params })
}

/// State handed to the observer after each completed outer step.
pub struct OuterStep<'a> {
    pub metrics: MetricsRow,
    pub policy: &'a TimePolicy,
}

/// PPO training of `policy` against the frozen environment.
///
/// The reference policy is the policy as passed in. `observe` runs after
/// every outer step whose update left the parameters finite, so a caller
/// that checkpoints there always holds the last good policy. Divergence
/// aborts with [`Error::NonFinite`].
pub fn train_tpm<F>(
    policy: &mut TimePolicy,
    env: &Environment,
    cfg: &RLConfig,
    seed: u64,
    mut observe: F,
) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&OuterStep<'_>) -> Result<()>,
{
    cfg.validate()?;
    let reference = policy.clone();
    let mut opt = OptimizerState::new(
        policy.net().num_params(),
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    );
    let groups = cfg.groups_per_step();
    let n_targets = env.targets.len();
    let root = RngStream::new(seed, ROLLOUT_STREAM);
    let mut log = Vec::with_capacity(cfg.outer_steps);
    for step in 0..cfg.outer_steps {
        let old = policy.clone();
        let rollouts: Vec<Result<RolloutGroup>> = (0..groups)
            .into_par_iter()
            .map(|g| {
                let target = (step * groups + g) % n_targets;
                rollout_group(
                    &old,
                    &reference,
                    env,
                    target,
                    cfg.group_size,
                    cfg.gamma,
                    &root.fork(&[step as u64, g as u64]),
                )
            })
            .collect();
        let rollouts = rollouts.into_iter().collect::<Result<Vec<_>>>()?;
        let samples: Vec<PpoSample<'_>> = rollouts.iter().flat_map(|g| g.samples()).collect();

        let records: Vec<&RewardRecord> = rollouts.iter().flat_map(|g| &g.rewards).collect();
        let count = records.len() as f64;
        let mean_reward = records.iter().map(|r| r.discounted).sum::<f64>() / count;
        let mean_ir = records.iter().map(|r| r.ir).sum::<f64>() / count;
        let mean_n = records.iter().map(|r| r.steps as f64).sum::<f64>() / count;

        let mut mean_kl = None;
        let mut norm_sum = 0.0;
        for _ in 0..cfg.inner_epochs {
            let out = ppo_loss(policy, &samples, cfg)?;
            mean_kl.get_or_insert(out.mean_kl);
            let mut grads = out.grads;
            norm_sum += clip_global_norm(&mut grads, cfg.max_grad_norm);
            adamw_step(policy.net_mut().params_mut(), &grads, &mut opt)?;
        }
        if policy.net().params().iter().any(|p| !p.is_finite()) {
            *policy = old;
            return Err(Error::NonFinite(format!("policy parameters diverged at outer step {step}")));
        }
        let metrics = MetricsRow {
            outer_step: step,
            mean_reward,
            mean_ir,
            mean_n,
            mean_kl: mean_kl.unwrap_or(0.0),
            grad_norm: norm_sum / cfg.inner_epochs as f64,
        };
        observe(&OuterStep { metrics, policy })?;
        log.push(metrics);
    }
    Ok(log)
}

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Derivative of the Beta mean `α/(α+β)` with respect to the raw outputs.
fn mean_grad_raw(a: f64, b: f64) -> (f64, f64) {
    let p = shapes_from_raw(a, b);
    let s = p.alpha() + p.beta();
    let (ja, jb) = shapes_jacobian(a, b);
    (p.beta() / (s * s) * ja, -p.alpha() / (s * s) * jb)
}

/// Settings for the naive two-step reconstruction objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStepConfig {
    pub batch: usize,
    pub updates: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Starting noise levels are drawn uniformly from `[t_start_min, 1]`.
    pub t_start_min: f64,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        Self { batch: 256, updates: 800, lr: 1e-5, max_grad_norm: 1.0, t_start_min: 0.05 }
    }
}

/// Loss and parameter gradient of the two-step reconstruction objective on
/// one example.
///
/// From `x_{t0}` the policy's mean decay picks `t1 = r1·t0`, one Euler step
/// lands at `x_{t1}`, a second mean decay picks `t2 = r2·t1`, and a second
/// Euler step gives `x_{t2}`. The loss is `‖x_{t2} − x0‖²`. Gradients reach
/// the policy through the predicted times; the second step's policy inputs
/// are treated as constants.
pub fn two_step_loss(
    policy: &TimePolicy,
    field: &VelocityField,
    x0: &[f64],
    eps: &[f64],
    t0: f64,
) -> Result<(f64, Vec<f64>)> {
    let net = policy.net();
    let x = interpolate(x0, eps, t0)?;
    let v0 = field.eval(&x, t0)?;
    let f0 = StepFeatures::new(&x, &v0, t0)?;
    let acts0 = net.forward_cached(f0.as_slice())?;
    let (a1, b1) = (acts0.output()[0], acts0.output()[1]);
    let r1 = shapes_from_raw(a1, b1).mean();
    let t1 = r1 * t0;
    let x1: Vec<f64> = x.iter().zip(&v0).map(|(xi, vi)| xi + (t1 - t0) * vi).collect();
    let v1 = field.eval(&x1, t1)?;
    let f1 = StepFeatures::new(&x1, &v1, t1)?;
    let acts1 = net.forward_cached(f1.as_slice())?;
    let (a2, b2) = (acts1.output()[0], acts1.output()[1]);
    let r2 = shapes_from_raw(a2, b2).mean();
    let t2 = r2 * t1;
    let x2: Vec<f64> = x1.iter().zip(&v1).map(|(xi, vi)| xi + (t2 - t1) * vi).collect();

    let resid: Vec<f64> = x2.iter().zip(x0).map(|(a, b)| a - b).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>();
    let g2: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

    let g2_v1 = dot(&g2, &v1);
    let dl_dt2 = g2_v1;
    let dl_dr2 = dl_dt2 * t1;
    let wg: Vec<f64> = g2.iter().map(|g| g * (t2 - t1)).collect();
    let (gx1_field, gt1_field) = field.vjp(&x1, t1, &wg)?;
    let dl_dx1: Vec<f64> = g2.iter().zip(&gx1_field).map(|(a, b)| a + b).collect();
    let dl_dt1 = -g2_v1 + dl_dt2 * r2 + gt1_field + dot(&dl_dx1, &v0);
    let dl_dr1 = dl_dt1 * t0;

    let mut grads = vec![0.0; net.num_params()];
    let (ma1, mb1) = mean_grad_raw(a1, b1);
    net.backward_cached(&acts0, &[dl_dr1 * ma1, dl_dr1 * mb1], &mut grads)?;
    let (ma2, mb2) = mean_grad_raw(a2, b2);
    net.backward_cached(&acts1, &[dl_dr2 * ma2, dl_dr2 * mb2], &mut grads)?;
    Ok((loss, grads))
}

/// Trains the policy by gradient descent on the two-step reconstruction
/// loss. Returns the per-update mean loss.
pub fn train_two_step(policy: &mut TimePolicy, env: &Environment, cfg: &TwoStepConfig, seed: u64) -> Result<Vec<f64>> {
    if cfg.batch == 0 || !(cfg.t_start_min > 0.0 && cfg.t_start_min < 1.0) {
        return Err(Error::Config("two-step training needs batch > 0 and t_start_min in (0, 1)".into()));
    }
    let mut opt = OptimizerState::new(policy.net().num_params(), AdamWConfig { lr: cfg.lr, ..Default::default() });
    let root = RngStream::new(seed, NAIVE_STREAM);
    let mut curve = Vec::with_capacity(cfg.updates);
    for step in 0..cfg.updates {
        let frozen = &*policy;
        let parts: Vec<Result<(f64, Vec<f64>)>> = (0..cfg.batch)
            .into_par_iter()
            .map(|i| {
                let mut rng = root.fork(&[step as u64, i as u64]);
                let ti = (step * cfg.batch + i) % env.targets.len();
                let x0 = env.targets[ti].sample(&mut rng);
                let eps = rng.normal_vec(env.dim());
                let t0 = cfg.t_start_min + (1.0 - cfg.t_start_min) * rng.uniform();
                two_step_loss(frozen, &env.fields[ti], &x0, &eps, t0)
            })
            .collect();
        let mut loss = 0.0;
        let mut grads = vec![0.0; policy.net().num_params()];
        for p in parts {
            let (l, g) = p?;
            loss += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / cfg.batch as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        clip_global_norm(&mut grads, cfg.max_grad_norm);
        adamw_step(policy.net_mut().params_mut(), &grads, &mut opt)?;
        curve.push(loss * scale);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpm::init_policy;
    use proptest::prelude::*;

    #[test]
    fn discount_examples() {
        assert_eq!(discounted_reward(0.7, 9, 1.0).unwrap(), 0.7);
        assert_eq!(discounted_reward(-2.5, 1, 0.3).unwrap(), -2.5);
        let r = discounted_reward(1.0, 3, 0.9).unwrap();
        assert!((r - (0.81 + 0.9 + 1.0) / 3.0).abs() < 1e-15);
        assert!(discounted_reward(1.0, 0, 0.9).is_err());
        assert!(discounted_reward(1.0, 3, 0.0).is_err());
        assert!(discounted_reward(1.0, 3, 1.1).is_err());
    }

    #[test]
    fn discount_closed_form() {
        for n in 1..30 {
            for g in [0.5, 0.85, 0.95, 0.999] {
                let closed = (1.0 - f64::powi(g, n as i32)) / (n as f64 * (1.0 - g));
                assert!((discounted_reward(1.0, n, g).unwrap() - closed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rloo_examples() {
        assert_eq!(rloo_advantages(&[1.0, 2.0, 3.0]).unwrap(), vec![-1.5, 0.0, 1.5]);
        assert_eq!(rloo_advantages(&[0.4; 5]).unwrap(), vec![0.0; 5]);
        assert!(rloo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn reward_examples() {
        let t = TargetSpec::standard_normal(2);
        let reference = -(2.0 * std::f64::consts::PI).ln() - 1.0;
        let r = ToyReward::with_reference(t.clone(), reference);
        assert!((r.score(&[0.0, 0.0]) - 1.0).abs() < 1e-14);
        // |y|² = 2 gives log p = −ln 2π − 1 = reference.
        assert!(r.score(&[1.0, 1.0]).abs() < 1e-14);
        assert_eq!(r.score(&[40.0, 0.0]), REWARD_FLOOR);
        // The frozen Monte-Carlo reference lands near the analytic one.
        let mc = ToyReward::new(t, 100_000, &mut RngStream::new(0, 0));
        assert!((mc.reference() - reference).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn rloo_sums_to_zero_and_ignores_shifts(
            rewards in prop::collection::vec(-10.0f64..2.0, 2..16),
            shift in -5.0f64..5.0,
        ) {
            let a = rloo_advantages(&rewards).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let b = rloo_advantages(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn discount_monotonicity(ir in 0.01f64..5.0, n in 1usize..40, g in 0.05f64..0.99) {
            let here = discounted_reward(ir, n, g).unwrap();
            prop_assert!(discounted_reward(ir, n, (g + 0.01).min(1.0)).unwrap() >= here);
            prop_assert!(discounted_reward(ir, n + 1, g).unwrap() < here);
        }
    }

    fn toy_env() -> Environment {
        let target = TargetSpec::standard_normal(2);
        let field = VelocityField::oracle(target.clone()).unwrap();
        Environment::new(vec![target], vec![field], ScheduleConfig::default(), 1000, 1).unwrap()
    }

    #[test]
    fn log_prob_under_sampling_policy_matches_stored() {
        let env = toy_env();
        let mut rng = RngStream::new(3, 3);
        let mut pol = init_policy(2, 0.7, &[8, 8], &mut rng).unwrap();
        // Perturb output weights so the law depends on the state.
        let n = pol.net().num_params();
        for (i, p) in pol.net_mut().params_mut().iter_mut().enumerate().skip(n - 18) {
            *p += 0.05 * ((i % 7) as f64 - 3.0);
        }
        let group = rollout_group(&pol, &pol, &env, 0, 4, 0.95, &rng).unwrap();
        for t in &group.trajectories {
            let lp = traj_log_prob(&pol, t).unwrap();
            assert!((lp - t.log_prob()).abs() < 1e-12);
        }
        let adv_sum: f64 = group.rewards.iter().map(|r| r.advantage).sum();
        assert!(adv_sum.abs() < 1e-10);
    }

    #[test]
    fn ppo_loss_at_reference_with_zero_advantage_is_zero() {
        let env = toy_env();
        let rng = RngStream::new(4, 4);
        let pol = init_policy(2, 0.6, &[8], &mut rng.clone()).unwrap();
        let mut group = rollout_group(&pol, &pol, &env, 0, 3, 0.95, &rng).unwrap();
        group.rewards.iter_mut().for_each(|r| r.advantage = 0.0);
        let samples: Vec<_> = group.samples().collect();
        let out = ppo_loss(&pol, &samples, &RLConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| g.abs() < 1e-14));
        assert_eq!(out.mean_kl, 0.0);
    }

    #[test]
    fn ppo_loss_rejects_empty_batch() {
        let pol = init_policy(2, 0.6, &[8], &mut RngStream::new(0, 0)).unwrap();
        assert!(ppo_loss(&pol, &[], &RLConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RLConfig::default().validate().is_ok());
        assert!(RLConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(RLConfig { batch: 10, ..Default::default() }.validate().is_err());
        assert!(RLConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
    }
}
