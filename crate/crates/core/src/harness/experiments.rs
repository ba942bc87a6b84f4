//! Evaluation and the preset experiments: γ sweep, adaptive versus fixed
//! schedules, steps versus target complexity, and the two-step
//! reconstruction control.

use rayon::prelude::*;
use serde::ser::{SerializeStruct, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::rl::{discounted_reward, train_tpm, train_two_step, Environment, MetricsRow, OuterStep};
use crate::sampler::{sample_adaptive_from, sample_fixed_from, ScheduleMode, Trajectory};
use crate::special_math::{stream_key, RngStream};
use crate::tpm::{init_policy, DecayMode, TimePolicy};

const EVAL_TAG: u64 = 0xE7A1;
const POLICY_TAG: u64 = 0x9017;

/// Outcome of one evaluation rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub target: usize,
    pub complexity: usize,
    pub steps: usize,
    pub ir: f64,
    pub times: Vec<f64>,
    pub sample: Vec<f64>,
}

/// Aggregates over a set of rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub rollouts: usize,
    #[serde(rename = "mean_N")]
    pub mean_n: f64,
    #[serde(rename = "std_N")]
    pub std_n: f64,
    pub mean_ir: f64,
    pub std_ir: f64,
    pub mean_reward: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Summary {
    const FIELDS: usize = 6;

    fn write_fields<S: SerializeStruct>(&self, s: &mut S) -> std::result::Result<(), S::Error> {
        s.serialize_field("rollouts", &self.rollouts)?;
        s.serialize_field("mean_N", &self.mean_n)?;
        s.serialize_field("std_N", &self.std_n)?;
        s.serialize_field("mean_ir", &self.mean_ir)?;
        s.serialize_field("std_ir", &self.std_ir)?;
        s.serialize_field("mean_reward", &self.mean_reward)
    }
}

/// CSV rows are flat, so the labelled rows below spell out their summary
/// columns instead of nesting them.
macro_rules! flat_row {
    ($ty:ident, $($field:ident),+) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                let n = [$(stringify!($field)),+].len();
                let mut s = serializer.serialize_struct(stringify!($ty), n + Summary::FIELDS)?;
                $(s.serialize_field(stringify!($field), &self.$field)?;)+
                self.summary.write_fields(&mut s)?;
                s.end()
            }
        }
    };
}

flat_row!(GammaRow, gamma);
flat_row!(BaselineRow, method, steps);
flat_row!(ComplexityRow, complexity);

pub fn summarize(rollouts: &[Rollout], gamma: f64) -> Result<Summary> {
    if rollouts.is_empty() {
        return Err(Error::Empty("evaluation rollouts".into()));
    }
    let (mean_n, std_n) = mean_std(rollouts.iter().map(|r| r.steps as f64));
    let (mean_ir, std_ir) = mean_std(rollouts.iter().map(|r| r.ir));
    let mut reward = 0.0;
    for r in rollouts {
        reward += discounted_reward(r.ir, r.steps, gamma)?;
    }
    Ok(Summary {
        rollouts: rollouts.len(),
        mean_n,
        std_n,
        mean_ir,
        std_ir,
        mean_reward: reward / rollouts.len() as f64,
    })
}

/// Mean diffusion time at each step index; finished rollouts count as `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_t: f64,
    /// Rollouts still running at this step.
    pub active: usize,
}

pub fn schedule_curve(rollouts: &[Rollout]) -> Vec<CurvePoint> {
    let longest = rollouts.iter().map(|r| r.times.len()).max().unwrap_or(0);
    (0..longest)
        .map(|n| {
            let mut sum = 0.0;
            let mut active = 0;
            for r in rollouts {
                if let Some(&t) = r.times.get(n) {
                    sum += t;
                    if t > 0.0 {
                        active += 1;
                    }
                }
            }
            CurvePoint { step: n, mean_t: sum / rollouts.len() as f64, active }
        })
        .collect()
}

/// Which schedule an evaluation runs.
#[derive(Debug, Clone, Copy)]
pub enum Schedule<'a> {
    Adaptive(&'a TimePolicy),
    /// A fixed schedule mode with its step count.
    Fixed(ScheduleMode, usize),
}

/// Held-out evaluation on `targets`, `cfg.eval.rollouts` rollouts each.
/// Rollout `i` of target `k` starts from the same noise under every
/// schedule, so schedules are compared on common initial states.
pub fn evaluate(
    cfg: &ExperimentConfig,
    env: &Environment,
    schedule: Schedule<'_>,
    targets: &[usize],
) -> Result<Vec<Rollout>> {
    let root = RngStream::new(stream_key(cfg.seed, &[EVAL_TAG]), 0);
    let mut sched = env.schedule.clone();
    if cfg.eval.deterministic {
        sched.decay_mode = DecayMode::Deterministic;
    }
    if let Schedule::Fixed(mode, n) = schedule {
        if !matches!(mode, ScheduleMode::FixedUniform | ScheduleMode::FixedShifted) {
            return Err(Error::Config(format!("{mode:?} is not a fixed schedule")));
        }
        sched = sched.with_mode(mode);
        sched.fixed_n = n;
    }
    let jobs: Vec<(usize, usize)> = targets.iter().flat_map(|&k| (0..cfg.eval.rollouts).map(move |i| (k, i))).collect();
    jobs.par_iter()
        .map(|&(k, i)| {
            let x0 = root.fork(&[k as u64, i as u64, 0]).normal_vec(env.dim());
            let field = &env.fields[k];
            let traj: Trajectory = match schedule {
                Schedule::Adaptive(p) => {
                    sample_adaptive_from(p, field, &sched, x0, &mut root.fork(&[k as u64, i as u64, 1]))?
                }
                Schedule::Fixed(..) => sample_fixed_from(field, &sched, x0)?,
            };
            let sample = traj.final_sample().to_vec();
            Ok(Rollout {
                target: k,
                complexity: env.targets[k].complexity(),
                steps: traj.steps(),
                ir: env.rewards[k].score(&sample),
                times: traj.times,
                sample,
            })
        })
        .collect()
}

pub fn all_targets(env: &Environment) -> Vec<usize> {
    (0..env.targets.len()).collect()
}

pub fn build_environment(cfg: &ExperimentConfig, fields: Vec<crate::flow::VelocityField>) -> Result<Environment> {
    Environment::new(
        cfg.targets.iter().map(|t| t.distribution.clone()).collect(),
        fields,
        cfg.schedule.clone(),
        cfg.rl.reward_ref_samples,
        cfg.seed,
    )
}

pub fn initial_policy(cfg: &ExperimentConfig, dim: usize) -> Result<TimePolicy> {
    let mut rng = RngStream::new(stream_key(cfg.seed, &[POLICY_TAG]), 0);
    init_policy(dim, cfg.policy.r_target, &cfg.policy.hidden, &mut rng)
}

/// Trains a fresh policy with the config's RL settings; `observe` sees every
/// completed outer step.
pub fn train_policy<F>(cfg: &ExperimentConfig, env: &Environment, observe: F) -> Result<(TimePolicy, Vec<MetricsRow>)>
where
    F: FnMut(&OuterStep<'_>) -> Result<()>,
{
    let mut policy = initial_policy(cfg, env.dim())?;
    let log = train_tpm(&mut policy, env, &cfg.rl, cfg.seed, observe)?;
    Ok((policy, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaRow {
    pub gamma: f64,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct GammaRun {
    pub row: GammaRow,
    pub policy: TimePolicy,
    pub metrics: Vec<MetricsRow>,
    pub curve: Vec<CurvePoint>,
}

/// Trains one policy per γ from the same initial policy and seeds, then
/// evaluates each on the held-out rollouts over all targets.
pub fn sweep_gamma(cfg: &ExperimentConfig, env: &Environment) -> Result<Vec<GammaRun>> {
    if cfg.sweep.gammas.is_empty() {
        return Err(Error::Config("the gamma sweep needs at least one gamma".into()));
    }
    let mut runs = Vec::with_capacity(cfg.sweep.gammas.len());
    for &gamma in &cfg.sweep.gammas {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("sweep gamma {gamma} is outside (0, 1)")));
        }
        let mut run_cfg = cfg.clone();
        run_cfg.rl.gamma = gamma;
        log::info!("gamma sweep: training with gamma = {gamma}");
        let (policy, metrics) = train_policy(&run_cfg, env, |_| Ok(()))?;
        let rollouts = evaluate(cfg, env, Schedule::Adaptive(&policy), &all_targets(env))?;
        runs.push(GammaRun {
            row: GammaRow { gamma, summary: summarize(&rollouts, gamma)? },
            policy,
            metrics,
            curve: schedule_curve(&rollouts),
        });
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub method: String,
    /// Step budget of a fixed schedule; the adaptive row reports its mean.
    pub steps: f64,
    pub summary: Summary,
}

/// Adaptive policy against fixed-uniform schedules at the matched step
/// count `round(mean N)` and at twice that.
pub fn compare_baselines(cfg: &ExperimentConfig, env: &Environment, policy: &TimePolicy) -> Result<Vec<BaselineRow>> {
    let targets = all_targets(env);
    let gamma = cfg.rl.gamma;
    let adaptive = summarize(&evaluate(cfg, env, Schedule::Adaptive(policy), &targets)?, gamma)?;
    let matched = (adaptive.mean_n.round() as usize).max(1);
    let mut rows = vec![BaselineRow { method: "adaptive".into(), steps: adaptive.mean_n, summary: adaptive }];
    for (name, n) in [("fixed-matched", matched), ("fixed-double", 2 * matched)] {
        let s = summarize(&evaluate(cfg, env, Schedule::Fixed(ScheduleMode::FixedUniform, n), &targets)?, gamma)?;
        rows.push(BaselineRow { method: name.into(), steps: n as f64, summary: s });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub complexity: usize,
    pub summary: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub basis: &'static str,
    pub pearson: f64,
    pub sample_size: usize,
}

#[derive(Debug, Clone)]
pub struct ComplexitySweep {
    pub rows: Vec<ComplexityRow>,
    pub curves: Vec<(usize, Vec<CurvePoint>)>,
    /// Over individual rollouts, then over the per-level means.
    pub correlations: [Correlation; 2],
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Domain("correlation needs two equally long series of at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("correlation is undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mean step count per complexity level for one policy, with the Pearson
/// correlation between level and step count.
pub fn complexity_sweep(cfg: &ExperimentConfig, env: &Environment, policy: &TimePolicy) -> Result<ComplexitySweep> {
    let levels = &cfg.sweep.complexity_levels;
    if levels.len() < 2 {
        return Err(Error::Config("the complexity sweep needs at least two levels".into()));
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &level in levels {
        let targets: Vec<usize> = (0..env.targets.len()).filter(|&k| env.targets[k].complexity() == level).collect();
        if targets.is_empty() {
            return Err(Error::Config(format!("no target has complexity level {level}")));
        }
        let rollouts = evaluate(cfg, env, Schedule::Adaptive(policy), &targets)?;
        for r in &rollouts {
            xs.push(level as f64);
            ys.push(r.steps as f64);
        }
        rows.push(ComplexityRow { complexity: level, summary: summarize(&rollouts, cfg.rl.gamma)? });
        curves.push((level, schedule_curve(&rollouts)));
    }
    let lx: Vec<f64> = rows.iter().map(|r| r.complexity as f64).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.summary.mean_n).collect();
    let correlations = [
        Correlation { basis: "rollouts", pearson: pearson(&xs, &ys)?, sample_size: xs.len() },
        Correlation { basis: "level-means", pearson: pearson(&lx, &ly)?, sample_size: lx.len() },
    ];
    Ok(ComplexitySweep { rows, curves, correlations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeControl {
    pub naive_loss: Vec<f64>,
    pub naive: Summary,
    pub discounted: Summary,
}

/// Trains the two-step reconstruction variant from the same initial policy
/// and compares it with a policy trained on the discounted reward.
pub fn negative_control(cfg: &ExperimentConfig, env: &Environment, trained: &TimePolicy) -> Result<NegativeControl> {
    let mut naive = initial_policy(cfg, env.dim())?;
    let naive_loss = train_two_step(&mut naive, env, &cfg.naive, cfg.seed)?;
    let targets = all_targets(env);
    Ok(NegativeControl {
        naive_loss,
        naive: summarize(&evaluate(cfg, env, Schedule::Adaptive(&naive), &targets)?, cfg.rl.gamma)?,
        discounted: summarize(&evaluate(cfg, env, Schedule::Adaptive(trained), &targets)?, cfg.rl.gamma)?,
    })
}
