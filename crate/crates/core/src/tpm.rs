//! The time-prediction policy: per-step features in, Beta law over the
//! multiplicative time decay out.
//!
//! The network emits raw `(a, b)`; shapes are `α = 1 + e^a`, `β = 1 + e^b`
//! so the decay law is always unimodal.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::special_math::{beta_log_pdf, beta_log_pdf_grad, beta_sample, BetaParams, RngStream, SAMPLE_EPS};
use crate::tensor_nn::{read_net, read_u32, write_net, DenseNet};

/// Raw outputs are clamped to `±RAW_CLAMP` before exponentiation.
pub const RAW_CLAMP: f64 = 30.0;

pub const FEATURE_LAYOUT: &str = "state[d] velocity[d] t t^2";

/// Input to the policy at one denoising step: the pre-step state, the
/// field's velocity there, the current time and its square.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFeatures(Vec<f64>);

impl StepFeatures {
    pub fn new(state: &[f64], velocity: &[f64], t: f64) -> Result<Self> {
        check_len(state.len(), velocity.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(domain(format!("feature time must lie in [0, 1], got {t}")));
        }
        let mut v = Vec::with_capacity(2 * state.len() + 2);
        v.extend_from_slice(state);
        v.extend_from_slice(velocity);
        v.push(t);
        v.push(t * t);
        Ok(Self(v))
    }

    pub fn len_for_dim(dim: usize) -> usize {
        2 * dim + 2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn time(&self) -> f64 {
        self.0[self.0.len() - 2]
    }
}

/// How a decay rate is drawn from the predicted law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    #[default]
    Stochastic,
    /// Take the Beta mode instead of sampling.
    Deterministic,
}

/// One decay prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decay {
    pub r: f64,
    pub log_prob: f64,
    pub params: BetaParams,
}

/// Eq. 4 map from raw network outputs to Beta shapes, with overflow clamping.
pub fn shapes_from_raw(a: f64, b: f64) -> BetaParams {
    let alpha = 1.0 + a.clamp(-RAW_CLAMP, RAW_CLAMP).exp();
    let beta = 1.0 + b.clamp(-RAW_CLAMP, RAW_CLAMP).exp();
    BetaParams::new(alpha, beta).expect("1 + e^x > 1 for clamped finite x")
}

/// `(dα/da, dβ/db)`; zero where the clamp is active.
pub fn shapes_jacobian(a: f64, b: f64) -> (f64, f64) {
    let d = |x: f64| if x.abs() < RAW_CLAMP { x.exp() } else { 0.0 };
    (d(a), d(b))
}

/// Gradient of `log Beta(r; α(a), β(b))` with respect to the raw outputs.
pub fn log_prob_grad_raw(r: f64, a: f64, b: f64) -> (f64, f64) {
    let p = shapes_from_raw(a, b);
    let (ga, gb) = beta_log_pdf_grad(r, &p);
    let (ja, jb) = shapes_jacobian(a, b);
    (ga * ja, gb * jb)
}

/// `t_prev · r`, strictly below `t_prev`.
pub fn next_time(t_prev: f64, r: f64) -> Result<f64> {
    if !(t_prev > 0.0 && t_prev <= 1.0) {
        return Err(domain(format!("previous time must lie in (0, 1], got {t_prev}")));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(domain(format!("decay rate must lie in (0, 1), got {r}")));
    }
    Ok(r * t_prev)
}

/// Network mapping [`StepFeatures`] to raw Beta parameters `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePolicy {
    net: DenseNet,
    dim: usize,
}

impl TimePolicy {
    pub fn new(net: DenseNet, dim: usize) -> Result<Self> {
        if net.input_dim() != StepFeatures::len_for_dim(dim) || net.output_dim() != 2 {
            return Err(Error::Config(format!(
                "policy network {:?} does not fit {}-dimensional states",
                net.sizes(),
                dim
            )));
        }
        Ok(Self { net, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn raw(&self, feats: &StepFeatures) -> Result<(f64, f64)> {
        let out = self.net.forward(feats.as_slice())?;
        if !out[0].is_finite() || !out[1].is_finite() {
            return Err(Error::NonFinite("policy output".into()));
        }
        Ok((out[0], out[1]))
    }

    pub fn predict_decay(&self, feats: &StepFeatures, rng: &mut RngStream, mode: DecayMode) -> Result<Decay> {
        let params = tpm_params(self, feats)?;
        let r = match mode {
            DecayMode::Stochastic => beta_sample(&params, rng),
            DecayMode::Deterministic => params.mode().clamp(SAMPLE_EPS, 1.0 - SAMPLE_EPS),
        };
        let log_prob = beta_log_pdf(r, &params)?;
        Ok(Decay { r, log_prob, params })
    }
}

/// Beta shapes predicted for `feats`.
pub fn tpm_params(policy: &TimePolicy, feats: &StepFeatures) -> Result<BetaParams> {
    let (a, b) = policy.raw(feats)?;
    Ok(shapes_from_raw(a, b))
}

/// Raw outputs whose Beta law has mean exactly `r_target`. The shape on the
/// smaller side of the mean is pinned to 2.
pub fn raw_for_mean(r_target: f64) -> Result<(f64, f64)> {
    if !(r_target > 0.0 && r_target < 1.0) {
        return Err(domain(format!("target decay must lie in (0, 1), got {r_target}")));
    }
    let (alpha, beta) = if r_target >= 0.5 {
        (2.0 * r_target / (1.0 - r_target), 2.0)
    } else {
        (2.0, 2.0 * (1.0 - r_target) / r_target)
    };
    Ok(((alpha - 1.0).ln(), (beta - 1.0).ln()))
}

/// Random hidden layers, zero output weights, output biases chosen so that
/// every state maps to the same Beta law with mean `r_target`.
pub fn init_policy(dim: usize, r_target: f64, hidden: &[usize], rng: &mut RngStream) -> Result<TimePolicy> {
    let (a, b) = raw_for_mean(r_target)?;
    let mut sizes = vec![StepFeatures::len_for_dim(dim)];
    sizes.extend_from_slice(hidden);
    sizes.push(2);
    let mut net = DenseNet::random(&sizes, rng)?;
    let last = net.num_layers() - 1;
    let (w, bias) = net.layer_mut(last);
    w.iter_mut().for_each(|x| *x = 0.0);
    bias[0] = a;
    bias[1] = b;
    TimePolicy::new(net, dim)
}

pub const POLICY_MAGIC: &[u8; 8] = b"SRLTPM\0\0";
pub const POLICY_VERSION: u32 = 1;

/// Policy checkpoint: magic, u32 version, u32 state dimension, u32 feature
/// length, then the embedded network checkpoint.
pub fn write_policy<W: Write>(policy: &TimePolicy, mut w: W) -> Result<()> {
    w.write_all(POLICY_MAGIC)?;
    w.write_all(&POLICY_VERSION.to_le_bytes())?;
    w.write_all(&(policy.dim as u32).to_le_bytes())?;
    w.write_all(&(StepFeatures::len_for_dim(policy.dim) as u32).to_le_bytes())?;
    write_net(&policy.net, w)
}

pub fn policy_to_bytes(policy: &TimePolicy) -> Vec<u8> {
    let mut buf = Vec::new();
    write_policy(policy, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_policy<R: Read>(mut r: R) -> Result<TimePolicy> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != POLICY_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a policy checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != POLICY_VERSION {
        return Err(Error::Checkpoint(format!("unsupported policy checkpoint version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let feat_len = read_u32(&mut r)? as usize;
    if feat_len != StepFeatures::len_for_dim(dim) {
        return Err(Error::Checkpoint(format!("feature length {feat_len} does not match dimension {dim}")));
    }
    TimePolicy::new(read_net(r)?, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats() -> StepFeatures {
        StepFeatures::new(&[0.3, -1.0], &[0.5, 0.2], 0.8).unwrap()
    }

    fn policy_with_bias(a: f64, b: f64) -> TimePolicy {
        let mut net = DenseNet::zeros(&[6, 2]).unwrap();
        let (_, bias) = net.layer_mut(0);
        bias[0] = a;
        bias[1] = b;
        TimePolicy::new(net, 2).unwrap()
    }

    #[test]
    fn feature_layout() {
        let f = feats();
        assert_eq!(f.as_slice(), &[0.3, -1.0, 0.5, 0.2, 0.8, 0.8 * 0.8]);
        assert_eq!(f.time(), 0.8);
        assert!(StepFeatures::new(&[0.0], &[0.0], 1.2).is_err());
        assert!(StepFeatures::new(&[0.0], &[0.0, 1.0], 0.2).is_err());
    }

    #[test]
    fn shape_map_examples() {
        let p = tpm_params(&policy_with_bias(0.0, 0.0), &feats()).unwrap();
        assert_eq!((p.alpha(), p.beta()), (2.0, 2.0));
        let p = tpm_params(&policy_with_bias(3f64.ln(), 0.0), &feats()).unwrap();
        assert!((p.alpha() - 4.0).abs() < 1e-14 && p.beta() == 2.0);
        assert!((p.mean() - 2.0 / 3.0).abs() < 1e-14);
        let p = shapes_from_raw(-1e6, 1e6);
        assert!(p.alpha() > 1.0);
        assert_eq!(p.alpha(), 1.0 + (-30f64).exp());
        assert!(p.beta().is_finite());
    }

    #[test]
    fn deterministic_mode_uses_beta_mode() {
        let pol = policy_with_bias(0.0, 0.0);
        let d = pol.predict_decay(&feats(), &mut RngStream::new(0, 0), DecayMode::Deterministic).unwrap();
        assert_eq!(d.r, 0.5);
        assert!((d.log_prob - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stochastic_prediction_is_reproducible() {
        let pol = policy_with_bias(1.0, -0.5);
        let a = pol.predict_decay(&feats(), &mut RngStream::new(3, 9), DecayMode::Stochastic).unwrap();
        let b = pol.predict_decay(&feats(), &mut RngStream::new(3, 9), DecayMode::Stochastic).unwrap();
        assert_eq!(a, b);
        assert!(a.log_prob.is_finite());
    }

    #[test]
    fn next_time_examples() {
        assert_eq!(next_time(0.8, 0.5).unwrap(), 0.4);
        let t = next_time(1.0, 0.999_999).unwrap();
        assert!(t < 1.0 && t == 0.999_999);
        assert!(next_time(0.0, 0.5).is_err());
        assert!(next_time(1.1, 0.5).is_err());
        assert!(next_time(0.5, 1.0).is_err());
        assert!(next_time(0.5, 0.0).is_err());
    }

    #[test]
    fn init_policy_mean_is_state_independent() {
        let mut rng = RngStream::new(5, 5);
        let pol = init_policy(2, 0.5, &[16, 16], &mut rng).unwrap();
        assert_eq!(pol.raw(&feats()).unwrap(), (0.0, 0.0));
        let pol = init_policy(2, 0.75, &[16, 16], &mut rng).unwrap();
        for _ in 0..20 {
            let x = rng.normal_vec(2);
            let v = rng.normal_vec(2);
            let f = StepFeatures::new(&x, &v, rng.uniform()).unwrap();
            assert!((tpm_params(&pol, &f).unwrap().mean() - 0.75).abs() < 1e-9);
        }
        for r in [0.05, 0.3, 0.5, 0.9, 0.99] {
            let (a, b) = raw_for_mean(r).unwrap();
            assert!((shapes_from_raw(a, b).mean() - r).abs() < 1e-12);
        }
        assert!(init_policy(2, 1.0, &[4], &mut rng).is_err());
    }

    #[test]
    fn raw_log_prob_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(8, 1);
        let h = 1e-6;
        for _ in 0..50 {
            let a = 4.0 * rng.uniform() - 2.0;
            let b = 4.0 * rng.uniform() - 2.0;
            let r = 0.02 + 0.96 * rng.uniform();
            let f = |a: f64, b: f64| beta_log_pdf(r, &shapes_from_raw(a, b)).unwrap();
            let (ga, gb) = log_prob_grad_raw(r, a, b);
            let fa = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
            let fb = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
            assert!((ga - fa).abs() <= 1e-4 * fa.abs().max(1e-4), "{ga} vs {fa}");
            assert!((gb - fb).abs() <= 1e-4 * fb.abs().max(1e-4), "{gb} vs {fb}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let pol = init_policy(2, 0.7, &[8], &mut RngStream::new(1, 2)).unwrap();
        let bytes = policy_to_bytes(&pol);
        assert_eq!(&bytes[..8], POLICY_MAGIC);
        assert_eq!(read_policy(bytes.as_slice()).unwrap(), pol);
        assert!(read_policy(&bytes[8..]).is_err());
    }
}
