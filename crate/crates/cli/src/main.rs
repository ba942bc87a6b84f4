//! Command-line front-end for training and evaluating time policies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use schedrl::harness::experiments::all_targets;
use schedrl::harness::run::{train_field, write_atomic, write_csv_rows};
use schedrl::harness::{
    build_environment, compare_baselines, complexity_sweep, evaluate, export_plots, prepare_run_dir, resolve_fields,
    schedule_curve, summarize, sweep_gamma, train_policy, ExperimentConfig, FieldSource, Preset, Schedule,
};
use schedrl::rl::Environment;
use schedrl::sampler::ScheduleMode;
use schedrl::tpm::{policy_to_bytes, read_policy, TimePolicy};

#[derive(Parser, Debug)]
#[command(name = "schedrl", version = schedrl::harness::VERSION, about = "Learned diffusion-time schedules on toy flow-matching targets")]
struct Cli {
    /// Experiment config (TOML); keys it omits come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Evaluate with the Beta mode at each step instead of sampling.
    #[arg(long, global = true)]
    deterministic_inference: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the velocity field of every target whose field source is `train`.
    TrainFlow,
    /// Train the time policy with the discounted reward.
    TrainTpm,
    /// Generate held-out samples with the trained policy (or the configured fixed schedule).
    Sample,
    /// Train and evaluate one policy per discount factor.
    SweepGamma,
    /// Compare the trained policy with fixed-uniform schedules.
    CompareBaselines,
    /// Step counts of the trained policy per target complexity.
    ComplexitySweep,
    /// Render every recognised CSV under a run directory as SVG.
    ExportPlots {
        /// Run directory; defaults to the configured output directory.
        run_dir: Option<PathBuf>,
    },
}

const POLICY_FILE: &str = "policy.bin";

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let forced = cli.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    });
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, forced).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::preset(forced.unwrap_or_default()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cli.deterministic_inference {
        cfg.eval.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn environment(cfg: &ExperimentConfig, dir: &Path) -> Result<Environment> {
    let fields = resolve_fields(cfg, dir)?;
    Ok(build_environment(cfg, fields)?)
}

fn load_trained_policy(dir: &Path) -> Result<TimePolicy> {
    let path = dir.join(POLICY_FILE);
    let f = std::fs::File::open(&path).with_context(|| format!("{} not found; run train-tpm first", path.display()))?;
    Ok(read_policy(std::io::BufReader::new(f))?)
}

fn gamma_tag(g: f64) -> String {
    format!("{g}")
}

#[derive(Serialize)]
struct SampleRow {
    target: usize,
    complexity: usize,
    steps: usize,
    ir: f64,
    x: String,
}

fn run(cli: Cli) -> Result<()> {
    if let Command::ExportPlots { run_dir: Some(dir) } = &cli.command {
        for p in export_plots(dir)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let dir = prepare_run_dir(&cfg)?;
    match cli.command {
        Command::TrainFlow => {
            let mut trained = 0;
            for (i, t) in cfg.targets.iter().enumerate() {
                if t.field == FieldSource::Train {
                    train_field(&cfg, i, &dir)?;
                    trained += 1;
                }
            }
            if trained == 0 {
                log::warn!("no target uses a trained field; nothing to do");
            }
        }
        Command::TrainTpm => {
            let env = environment(&cfg, &dir)?;
            let policy_path = dir.join(POLICY_FILE);
            let metrics_path = dir.join("metrics.csv");
            let mut rows = Vec::new();
            let (policy, _) = train_policy(&cfg, &env, |step| {
                rows.push(step.metrics);
                write_atomic(&policy_path, &policy_to_bytes(step.policy))?;
                write_csv_rows(&metrics_path, &rows)?;
                log::info!(
                    "outer step {}: reward {:.4}, N {:.2}, kl {:.4}",
                    step.metrics.outer_step,
                    step.metrics.mean_reward,
                    step.metrics.mean_n,
                    step.metrics.mean_kl
                );
                Ok(())
            })?;
            write_atomic(&policy_path, &policy_to_bytes(&policy))?;
        }
        Command::Sample => {
            let env = environment(&cfg, &dir)?;
            let targets = all_targets(&env);
            let rollouts = match cfg.schedule.mode {
                ScheduleMode::Adaptive | ScheduleMode::DiscreteAdaptive => {
                    let policy = load_trained_policy(&dir)?;
                    evaluate(&cfg, &env, Schedule::Adaptive(&policy), &targets)?
                }
                mode => evaluate(&cfg, &env, Schedule::Fixed(mode, cfg.schedule.fixed_n), &targets)?,
            };
            let rows: Vec<SampleRow> = rollouts
                .iter()
                .map(|r| SampleRow {
                    target: r.target,
                    complexity: r.complexity,
                    steps: r.steps,
                    ir: r.ir,
                    x: r.sample.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
                })
                .collect();
            write_csv_rows(&dir.join("samples.csv"), &rows)?;
            write_csv_rows(&dir.join("schedule_samples.csv"), &schedule_curve(&rollouts))?;
            write_csv_rows(&dir.join("sample_summary.csv"), &[summarize(&rollouts, cfg.rl.gamma)?])?;
        }
        Command::SweepGamma => {
            let env = environment(&cfg, &dir)?;
            let runs = sweep_gamma(&cfg, &env)?;
            for r in &runs {
                let tag = gamma_tag(r.row.gamma);
                write_atomic(&dir.join(format!("policy_gamma_{tag}.bin")), &policy_to_bytes(&r.policy))?;
                write_csv_rows(&dir.join(format!("metrics_gamma_{tag}.csv")), &r.metrics)?;
                write_csv_rows(&dir.join(format!("schedule_gamma_{tag}.csv")), &r.curve)?;
                println!("gamma {tag}: mean N {:.3}, mean IR {:.4}", r.row.summary.mean_n, r.row.summary.mean_ir);
            }
            let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
            write_csv_rows(&dir.join("gamma_sweep.csv"), &rows)?;
        }
        Command::CompareBaselines => {
            let env = environment(&cfg, &dir)?;
            let policy = load_trained_policy(&dir)?;
            let rows = compare_baselines(&cfg, &env, &policy)?;
            for r in &rows {
                println!("{}: steps {:.3}, mean IR {:.4}", r.method, r.steps, r.summary.mean_ir);
            }
            write_csv_rows(&dir.join("baselines.csv"), &rows)?;
        }
        Command::ComplexitySweep => {
            let env = environment(&cfg, &dir)?;
            let policy = load_trained_policy(&dir)?;
            let sweep = complexity_sweep(&cfg, &env, &policy)?;
            for (level, curve) in &sweep.curves {
                write_csv_rows(&dir.join(format!("schedule_complexity_{level}.csv")), curve)?;
            }
            write_csv_rows(&dir.join("complexity.csv"), &sweep.rows)?;
            write_csv_rows(&dir.join("correlation.csv"), &sweep.correlations)?;
            for r in &sweep.rows {
                println!("complexity {}: mean N {:.3}", r.complexity, r.summary.mean_n);
            }
            for c in &sweep.correlations {
                println!("pearson ({}): {:.4} over {} points", c.basis, c.pearson, c.sample_size);
            }
        }
        Command::ExportPlots { run_dir: None } => {
            for p in export_plots(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::ExportPlots { .. } => unreachable!("handled before loading the config"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
