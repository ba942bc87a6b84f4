//! Flow-matching problem definition.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data) along the linear
//! path `x_t = t·ε + (1−t)·x0`, so the conditional velocity is `ε − x0` and
//! Euler steps with negative increments denoise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::special_math::RngStream;
use crate::tensor_nn::{adamw_step, AdamWConfig, DenseNet, OptimizerState};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One isotropic Gaussian component of a target mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Isotropic Gaussian mixture target. Its complexity level is the number of
/// components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TargetRepr", into = "TargetRepr")]
pub struct TargetSpec {
    dim: usize,
    components: Vec<Component>,
}

#[derive(Serialize, Deserialize)]
struct TargetRepr {
    dim: usize,
    components: Vec<Component>,
}

impl TryFrom<TargetRepr> for TargetSpec {
    type Error = Error;
    fn try_from(r: TargetRepr) -> Result<Self> {
        Self::new(r.dim, r.components)
    }
}

impl From<TargetSpec> for TargetRepr {
    fn from(t: TargetSpec) -> Self {
        Self { dim: t.dim, components: t.components }
    }
}

impl TargetSpec {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("target dimension must be positive".into()));
        }
        if components.is_empty() {
            return Err(Error::Config("target needs at least one component".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Config(format!("component {i}: weight must be positive")));
            }
            if !(c.std > 0.0) || !c.std.is_finite() {
                return Err(Error::Config(format!("component {i}: std must be positive")));
            }
            if c.mean.len() != dim || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("component {i}: mean must be {dim} finite reals")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("component weights sum to {total}, not 1")));
        }
        Ok(Self { dim, components })
    }

    pub fn gaussian(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(mean.len(), vec![Component { weight: 1.0, mean, std }])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid by construction")
    }

    /// `k` equally weighted components evenly spaced on a circle of the
    /// given radius in the first two coordinates (any further coordinates
    /// are zero). `k = 1` places the single component at the origin.
    pub fn ring(dim: usize, k: usize, radius: f64, std: f64) -> Result<Self> {
        if dim < 2 && k > 1 {
            return Err(Error::Config("ring targets with k > 1 need dim >= 2".into()));
        }
        if k == 0 {
            return Err(Error::Config("ring needs at least one component".into()));
        }
        let components = (0..k)
            .map(|j| {
                let mut mean = vec![0.0; dim];
                if k > 1 {
                    let angle = std::f64::consts::TAU * j as f64 / k as f64;
                    mean[0] = radius * angle.cos();
                    mean[1] = radius * angle.sin();
                }
                Component { weight: 1.0 / k as f64, mean, std }
            })
            .collect();
        Self::new(dim, components)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn complexity(&self) -> usize {
        self.components.len()
    }

    pub fn is_single_gaussian(&self) -> bool {
        self.components.len() == 1
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let c = self.pick_component(rng);
        c.mean.iter().map(|m| m + c.std * rng.standard_normal()).collect()
    }

    fn pick_component(&self, rng: &mut RngStream) -> &Component {
        if self.components.len() == 1 {
            return &self.components[0];
        }
        let u = rng.uniform();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.components.last().unwrap()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim as f64;
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                c.weight.ln() - 0.5 * d * (LN_2PI + 2.0 * c.std.ln()) - 0.5 * sq / (c.std * c.std)
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Monte-Carlo estimate of `E[log p(x)]` under the target itself.
    pub fn expected_log_density(&self, samples: usize, rng: &mut RngStream) -> f64 {
        let total: f64 = (0..samples).map(|_| self.log_density(&self.sample(rng))).sum();
        total / samples as f64
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `t·eps + (1−t)·x0`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len(x0.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(domain(format!("interpolation time must lie in [0, 1], got {t}")));
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| t * e + (1.0 - t) * a).collect())
}

/// Exact marginal velocity `E[ε − x0 | x_t = x]` for a single-Gaussian target.
///
/// For `x0 ~ N(μ, σ²I)`: `u = −μ + c(t)·(x − (1−t)μ)` with
/// `c(t) = (t − (1−t)σ²) / (t² + (1−t)²σ²)`.
pub fn oracle_velocity(x: &[f64], t: f64, target: &TargetSpec) -> Result<Vec<f64>> {
    if !target.is_single_gaussian() {
        return Err(Error::Unsupported(format!(
            "closed-form velocity needs a single-Gaussian target, got {} components",
            target.complexity()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(domain(format!("time must lie in [0, 1], got {t}")));
    }
    check_len(target.dim, x.len())?;
    Ok(gaussian_velocity(x, t, &target.components[0]))
}

fn gaussian_coeff(t: f64, var: f64) -> (f64, f64) {
    let s = t * t + (1.0 - t) * (1.0 - t) * var;
    let num = t - (1.0 - t) * var;
    let ds = 2.0 * t - 2.0 * (1.0 - t) * var;
    let c = num / s;
    let dc = ((1.0 + var) * s - num * ds) / (s * s);
    (c, dc)
}

fn gaussian_velocity(x: &[f64], t: f64, comp: &Component) -> Vec<f64> {
    let (c, _) = gaussian_coeff(t, comp.std * comp.std);
    x.iter().zip(&comp.mean).map(|(xi, m)| -m + c * (xi - (1.0 - t) * m)).collect()
}

/// Velocity field driving the sampler: either exact for a single-Gaussian
/// target or a network over `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityField {
    Oracle(TargetSpec),
    Learned(DenseNet),
}

impl VelocityField {
    pub fn oracle(target: TargetSpec) -> Result<Self> {
        if !target.is_single_gaussian() {
            return Err(Error::Unsupported(
                "the oracle field exists only for single-Gaussian targets; train a field".into(),
            ));
        }
        Ok(Self::Oracle(target))
    }

    /// Wraps a network mapping `[x, t]` (d + 1 inputs) to a velocity (d outputs).
    pub fn learned(net: DenseNet) -> Result<Self> {
        if net.input_dim() != net.output_dim() + 1 {
            return Err(Error::Config(format!(
                "field network must map d+1 inputs to d outputs, got {:?}",
                net.sizes()
            )));
        }
        Ok(Self::Learned(net))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Oracle(t) => t.dim,
            Self::Learned(n) => n.output_dim(),
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        match self {
            Self::Oracle(target) => Ok(gaussian_velocity(x, t, &target.components[0])),
            Self::Learned(net) => net.forward(&field_input(x, t)),
        }
    }

    /// Vector–Jacobian product: returns `(gᵀ ∂v/∂x, gᵀ ∂v/∂t)`.
    pub fn vjp(&self, x: &[f64], t: f64, g: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len(self.dim(), x.len())?;
        check_len(self.dim(), g.len())?;
        match self {
            Self::Oracle(target) => {
                let comp = &target.components[0];
                let (c, dc) = gaussian_coeff(t, comp.std * comp.std);
                let gx = g.iter().map(|gi| c * gi).collect();
                let gt =
                    g.iter().zip(x).zip(&comp.mean).map(|((gi, xi), m)| gi * (dc * (xi - (1.0 - t) * m) + c * m)).sum();
                Ok((gx, gt))
            }
            Self::Learned(net) => {
                let mut grads = net.backward(&field_input(x, t), g)?;
                let gt = grads.input.pop().unwrap();
                Ok((grads.input, gt))
            }
        }
    }
}

fn field_input(x: &[f64], t: f64) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.len() + 1);
    input.extend_from_slice(x);
    input.push(t);
    input
}

/// One flow-matching training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FmSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
}

pub fn draw_fm_batch(target: &TargetSpec, size: usize, rng: &mut RngStream) -> Vec<FmSample> {
    (0..size)
        .map(|_| FmSample { x0: target.sample(rng), eps: rng.normal_vec(target.dim), t: rng.uniform_open() })
        .collect()
}

fn sample_residual(field: &VelocityField, s: &FmSample) -> Result<(Vec<f64>, Vec<f64>)> {
    let xt = interpolate(&s.x0, &s.eps, s.t)?;
    let v = field.eval(&xt, s.t)?;
    let r = v.iter().zip(s.eps.iter().zip(&s.x0)).map(|(vi, (e, x))| vi - (e - x)).collect();
    Ok((xt, r))
}

/// Mean of `‖v(x_t, t) − (ε − x0)‖²` over the batch, for any field.
pub fn fm_loss_value(field: &VelocityField, batch: &[FmSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("flow-matching batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let (_, r) = sample_residual(field, s)?;
        total += r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

const GRAD_CHUNK: usize = 32;

/// Conditional flow-matching loss of a network field and its parameter gradient.
pub fn fm_loss(net: &DenseNet, batch: &[FmSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("flow-matching batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    // Chunks are reduced in index order so the result does not depend on
    // how rayon schedules them.
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = vec![0.0; net.num_params()];
            let mut loss = 0.0;
            for s in chunk {
                let xt = interpolate(&s.x0, &s.eps, s.t)?;
                let acts = net.forward_cached(&field_input(&xt, s.t))?;
                let r: Vec<f64> =
                    acts.output().iter().zip(s.eps.iter().zip(&s.x0)).map(|(vi, (e, x))| vi - (e - x)).collect();
                loss += r.iter().map(|v| v * v).sum::<f64>();
                let og: Vec<f64> = r.iter().map(|v| 2.0 * scale * v).collect();
                net.backward_cached(&acts, &og, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = vec![0.0; net.num_params()];
    for p in partials {
        let (l, g) = p?;
        loss += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// When set, the learning rate follows a cosine from `lr` down to this value.
    pub lr_end: Option<f64>,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], steps: 5000, batch: 256, lr: 1e-3, lr_end: None }
    }
}

impl FlowTrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_end {
            None => self.lr,
            Some(end) => {
                let frac = step as f64 / self.steps.max(1) as f64;
                end + 0.5 * (self.lr - end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Fresh network field for `dim`-dimensional data with the configured hidden widths.
pub fn init_field_net(dim: usize, hidden: &[usize], rng: &mut RngStream) -> Result<DenseNet> {
    let mut sizes = vec![dim + 1];
    sizes.extend_from_slice(hidden);
    sizes.push(dim);
    DenseNet::random(&sizes, rng)
}

/// Trains `net` on `target` with AdamW; returns the per-step loss curve.
pub fn train_flow(
    net: &mut DenseNet,
    target: &TargetSpec,
    cfg: &FlowTrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if net.input_dim() != target.dim + 1 || net.output_dim() != target.dim {
        return Err(Error::Config(format!(
            "field network {:?} does not fit a {}-dimensional target",
            net.sizes(),
            target.dim
        )));
    }
    let mut opt = OptimizerState::new(net.num_params(), AdamWConfig { lr: cfg.lr, ..Default::default() });
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_fm_batch(target, cfg.batch, rng);
        let (loss, grads) = fm_loss(net, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("flow-matching loss diverged at step {step}")));
        }
        opt.config.lr = cfg.lr_at(step);
        adamw_step(net.params_mut(), &grads, &mut opt)?;
        curve.push(loss);
    }
    Ok(curve)
}
