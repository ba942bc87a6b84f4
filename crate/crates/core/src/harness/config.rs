//! Experiment configuration: one TOML document describing targets, field
//! sources, flow training, schedule, RL and evaluation settings.
//!
//! A config file only needs the keys it wants to change. Loading overlays
//! the file on a preset, key by key, so `[rl] gamma = 0.9` alone is a
//! complete file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowTrainConfig, TargetSpec};
use crate::rl::{RLConfig, TwoStepConfig};
use crate::sampler::ScheduleConfig;

/// Where a target's velocity field comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldSource {
    /// Closed-form field; single-Gaussian targets only.
    Oracle,
    /// Trained from the `[flow]` settings (and cached in the run directory).
    Train,
    /// A network checkpoint written by `train-flow`.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub field: FieldSource,
    pub distribution: TargetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyInit {
    /// Mean decay rate of the untrained policy at every state.
    pub r_target: f64,
    pub hidden: Vec<usize>,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self { r_target: 0.75, hidden: vec![32, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out rollouts per target.
    pub rollouts: usize,
    /// Take the Beta mode at every step instead of sampling.
    pub deterministic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { rollouts: 500, deterministic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub complexity_levels: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { gammas: vec![0.85, 0.90, 0.95], complexity_levels: vec![1, 4, 8] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version of this document.
    pub version: u32,
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub targets: Vec<TargetEntry>,
    pub flow: FlowTrainConfig,
    pub schedule: ScheduleConfig,
    pub rl: RLConfig,
    pub policy: PolicyInit,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub naive: TwoStepConfig,
}

pub const CONFIG_VERSION: u32 = 1;

/// Ring mixtures with 1, 4 and 8 components used by the presets.
pub fn preset_targets() -> Vec<TargetEntry> {
    [1, 4, 8]
        .into_iter()
        .map(|k| TargetEntry {
            field: FieldSource::Train,
            distribution: TargetSpec::ring(2, k, 2.0, 0.3).expect("valid ring"),
        })
        .collect()
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Small batches and a raised learning rate so a run finishes in
    /// minutes on a laptop.
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            preset: Preset::Desk,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            targets: preset_targets(),
            flow: FlowTrainConfig { hidden: vec![64, 64], steps: 15_000, batch: 256, lr: 3e-3, lr_end: Some(1e-5) },
            schedule: ScheduleConfig::default(),
            rl: RLConfig { batch: 64, lr: 1e-3, outer_steps: 400, ..RLConfig::default() },
            policy: PolicyInit::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            naive: TwoStepConfig { batch: 64, updates: 400, lr: 1e-3, ..TwoStepConfig::default() },
        }
    }

    /// Batch 256, learning rate 1e-5, 200 outer steps, 5000 evaluation rollouts.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            preset: Preset::Paper,
            out_dir: PathBuf::from("runs/paper"),
            rl: RLConfig::default(),
            eval: EvalConfig { rollouts: 5000, ..EvalConfig::default() },
            naive: TwoStepConfig::default(),
            ..desk
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target is required".into()));
        }
        let dim = self.targets[0].distribution.dim();
        for (i, t) in self.targets.iter().enumerate() {
            if t.distribution.dim() != dim {
                return Err(Error::Config(format!(
                    "target {i} has dimension {}, expected {dim}",
                    t.distribution.dim()
                )));
            }
            if t.field == FieldSource::Oracle && !t.distribution.is_single_gaussian() {
                return Err(Error::Config(format!("target {i}: the oracle field needs a single-Gaussian target")));
            }
        }
        self.schedule.validate()?;
        self.rl.validate()?;
        if !(self.policy.r_target > 0.0 && self.policy.r_target < 1.0) {
            return Err(Error::Config("policy.r_target must lie in (0, 1)".into()));
        }
        if self.flow.steps == 0 || self.flow.batch == 0 || !(self.flow.lr > 0.0) {
            return Err(Error::Config("flow steps, batch and lr must be positive".into()));
        }
        if self.eval.rollouts == 0 {
            return Err(Error::Config("eval.rollouts must be positive".into()));
        }
        if self.sweep.gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(Error::Config("sweep gammas must lie in (0, 1)".into()));
        }
        if self.sweep.complexity_levels.contains(&0) {
            return Err(Error::Config("complexity levels must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a complete document with no preset underneath.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays a (possibly partial) document on a preset. The base is
    /// `forced` if given, else the document's own `preset` key, else desk.
    pub fn overlay(text: &str, forced: Option<Preset>) -> Result<Self> {
        let mut patch: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let named = match patch.get("preset") {
            Some(v) => Some(v.clone().try_into::<Preset>().map_err(|e| Error::Config(format!("preset: {e}")))?),
            None => None,
        };
        let base = forced.or(named).unwrap_or_default();
        if forced.is_some() {
            patch.remove("preset");
        }
        let mut tree = toml::Table::try_from(Self::preset(base)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, patch);
        let cfg: Self =
            toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, forced: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::overlay(&text, forced)
    }
}

/// Tables merge recursively; every other value (arrays included) replaces.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
