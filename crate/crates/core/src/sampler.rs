//! Euler generation loops: policy-driven adaptive schedules, fixed
//! baselines and the grid-quantized variant.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::flow::{TargetSpec, VelocityField};
use crate::special_math::{BetaParams, RngStream};
use crate::tpm::{DecayMode, StepFeatures, TimePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Adaptive,
    FixedUniform,
    FixedShifted,
    DiscreteAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    /// Predicted times below this trigger the forced jump to zero.
    pub t_min: f64,
    pub n_max: usize,
    pub fixed_n: usize,
    pub shift: f64,
    /// Discrete grid size `T`; times live on `i / T`.
    pub grid_size: usize,
    pub decay_mode: DecayMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Adaptive,
            t_min: 0.01,
            n_max: 40,
            fixed_n: 28,
            shift: 3.0,
            grid_size: 1000,
            decay_mode: DecayMode::Stochastic,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min <= 0.1) {
            return Err(Error::Config(format!("t_min must lie in (0, 0.1], got {}", self.t_min)));
        }
        if self.n_max < 2 {
            return Err(Error::Config("n_max must be at least 2".into()));
        }
        if self.grid_size < 10 {
            return Err(Error::Config("grid_size must be at least 10".into()));
        }
        if self.fixed_n < 1 {
            return Err(Error::Config("fixed_n must be at least 1".into()));
        }
        if !(self.shift > 0.0) {
            return Err(Error::Config("shift must be positive".into()));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: ScheduleMode) -> Self {
        Self { mode, ..self.clone() }
    }
}

/// Full record of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `t_0 = 1 > t_1 > … > t_N = 0`.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// One entry per recorded policy prediction.
    pub decay_rates: Vec<f64>,
    pub step_log_probs: Vec<f64>,
    /// Inputs and predicted laws for each recorded prediction, kept so the
    /// trajectory can be re-scored under another policy.
    pub step_features: Vec<StepFeatures>,
    pub step_params: Vec<BetaParams>,
    pub forced_final: bool,
    /// False for fixed-schedule baselines, which make no predictions.
    pub adaptive: bool,
}

impl Trajectory {
    fn start(x: Vec<f64>) -> Self {
        Self {
            times: vec![1.0],
            states: vec![x],
            decay_rates: Vec::new(),
            step_log_probs: Vec::new(),
            step_features: Vec::new(),
            step_params: Vec::new(),
            forced_final: false,
            adaptive: true,
        }
    }

    /// Number of Euler steps.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn num_predictions(&self) -> usize {
        self.decay_rates.len()
    }

    pub fn final_sample(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(format!("invalid trajectory: {m}")));
        if self.times.first() != Some(&1.0) {
            return bad("t_0 != 1");
        }
        if self.times.last() != Some(&0.0) || self.times.len() < 2 {
            return bad("t_N != 0");
        }
        if self.times.windows(2).any(|w| !(w[1] < w[0])) {
            return bad("times not strictly decreasing");
        }
        if self.states.len() != self.times.len() {
            return bad("|states| != |times|");
        }
        if self.states.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite state");
        }
        let k = self.decay_rates.len();
        if self.step_log_probs.len() != k || self.step_features.len() != k || self.step_params.len() != k {
            return bad("per-prediction records have different lengths");
        }
        let expected = match (self.adaptive, self.forced_final) {
            (false, _) => 0,
            (true, true) => self.steps() - 1,
            (true, false) => self.steps(),
        };
        if k != expected {
            return bad("prediction count does not match the termination kind");
        }
        Ok(())
    }

    /// CSV with columns `step,t,x0..x{d-1},r,log_prob`. The `r` and
    /// `log_prob` cells of a row hold the prediction that produced that
    /// row's time, and are empty where there was none.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.states[0].len();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.push("r".into());
        header.push("log_prob".into());
        out.write_record(&header)?;
        for (n, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![n.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match n.checked_sub(1).filter(|&i| i < self.decay_rates.len()) {
                Some(i) => {
                    row.push(self.decay_rates[i].to_string());
                    row.push(self.step_log_probs[i].to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `x + (t_to − t_from)·v`.
pub fn euler_update(x: &[f64], v: &[f64], t_from: f64, t_to: f64) -> Vec<f64> {
    let dt = t_to - t_from;
    x.iter().zip(v).map(|(xi, vi)| xi + dt * vi).collect()
}

/// One Euler step of the probability-flow ODE from `t_from` down to `t_to`.
pub fn euler_step(x: &[f64], t_from: f64, t_to: f64, field: &VelocityField) -> Result<Vec<f64>> {
    if !(0.0 <= t_to && t_to < t_from && t_from <= 1.0) {
        return Err(domain(format!("Euler step needs 0 <= t_to < t_from <= 1, got {t_from} -> {t_to}")));
    }
    let v = field.eval(x, t_from)?;
    Ok(euler_update(x, &v, t_from, t_to))
}

/// Nearest grid point `i / T` strictly below the previous index.
///
/// Returns `None` when `t_prev_index` is 0, i.e. the schedule cannot
/// decrease further and generation must terminate.
pub fn quantize_time(t: f64, grid_size: usize, t_prev_index: usize) -> Option<(f64, usize)> {
    if t_prev_index == 0 {
        return None;
    }
    let mut index = ((t.clamp(0.0, 1.0) * grid_size as f64).round() as usize).min(grid_size);
    if index >= t_prev_index {
        index = t_prev_index - 1;
    }
    Some((index as f64 / grid_size as f64, index))
}

fn check_state(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("state became non-finite at step {step}")))
    }
}

/// Adaptive generation from standard-normal noise drawn from `rng`.
pub fn sample_adaptive(
    policy: &TimePolicy,
    field: &VelocityField,
    target: &TargetSpec,
    cfg: &ScheduleConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    check_len(target.dim(), field.dim())?;
    let x = rng.normal_vec(target.dim());
    sample_adaptive_from(policy, field, cfg, x, rng)
}

/// Adaptive generation from a given initial noise `x_init`.
///
/// Each step evaluates the field once; that velocity feeds both the policy
/// features and the Euler update. A predicted time below `t_min`, or
/// reaching `n_max` steps, is replaced by a forced final step to `t = 0`
/// that carries no log-probability.
pub fn sample_adaptive_from(
    policy: &TimePolicy,
    field: &VelocityField,
    cfg: &ScheduleConfig,
    x_init: Vec<f64>,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let discrete = match cfg.mode {
        ScheduleMode::Adaptive => false,
        ScheduleMode::DiscreteAdaptive => true,
        m => return Err(Error::Config(format!("adaptive sampling called with mode {m:?}"))),
    };
    check_len(field.dim(), x_init.len())?;
    check_len(policy.dim(), x_init.len())?;
    let mut traj = Trajectory::start(x_init);
    let mut t = 1.0;
    let mut index = cfg.grid_size;
    for n in 1..=cfg.n_max {
        let x = traj.states.last().unwrap();
        let v = field.eval(x, t)?;
        let feats = StepFeatures::new(x, &v, t)?;
        let decay = policy.predict_decay(&feats, rng, cfg.decay_mode)?;
        let proposed = decay.r * t;
        let forced = proposed < cfg.t_min || n == cfg.n_max;
        let mut t_next = 0.0;
        let mut terminal = forced;
        if !forced {
            t_next = proposed;
            if discrete {
                let (tq, iq) =
                    quantize_time(proposed, cfg.grid_size, index).expect("index stays positive until termination");
                t_next = tq;
                index = iq;
                terminal = iq == 0;
            }
            traj.decay_rates.push(decay.r);
            traj.step_log_probs.push(decay.log_prob);
            traj.step_features.push(feats);
            traj.step_params.push(decay.params);
        }
        let x_next = euler_update(x, &v, t, t_next);
        check_state(&x_next, n)?;
        traj.states.push(x_next);
        traj.times.push(t_next);
        t = t_next;
        if terminal {
            traj.forced_final = forced;
            break;
        }
    }
    Ok(traj)
}

/// Time grid of a fixed schedule with `n` steps.
pub fn fixed_times(mode: ScheduleMode, n: usize, shift: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("fixed schedules need at least one step".into()));
    }
    let uniform = (0..=n).map(|i| 1.0 - i as f64 / n as f64);
    match mode {
        ScheduleMode::FixedUniform => Ok(uniform.collect()),
        ScheduleMode::FixedShifted => Ok(uniform.map(|u| time_shift(u, shift)).collect()),
        m => Err(Error::Config(format!("{m:?} is not a fixed schedule"))),
    }
}

/// `shift·t / (1 + (shift − 1)·t)`.
pub fn time_shift(t: f64, shift: f64) -> f64 {
    shift * t / (1.0 + (shift - 1.0) * t)
}

/// Baseline generation on a fixed uniform or shifted schedule.
pub fn sample_fixed(
    field: &VelocityField,
    target: &TargetSpec,
    cfg: &ScheduleConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    check_len(target.dim(), field.dim())?;
    let x = rng.normal_vec(target.dim());
    sample_fixed_from(field, cfg, x)
}

pub fn sample_fixed_from(field: &VelocityField, cfg: &ScheduleConfig, x_init: Vec<f64>) -> Result<Trajectory> {
    check_len(field.dim(), x_init.len())?;
    let times = fixed_times(cfg.mode, cfg.fixed_n, cfg.shift)?;
    let mut traj = Trajectory::start(x_init);
    traj.adaptive = false;
    for (n, w) in times.windows(2).enumerate() {
        let x = euler_step(traj.states.last().unwrap(), w[0], w[1], field)?;
        check_state(&x, n + 1)?;
        traj.states.push(x);
    }
    traj.times = times;
    Ok(traj)
}
