//! Experiment front-end shared by the command-line tool and the acceptance
//! suite.

pub mod config;
pub mod experiments;
pub mod plots;
pub mod run;

pub use config::{EvalConfig, ExperimentConfig, FieldSource, PolicyInit, Preset, SweepConfig, TargetEntry};
pub use experiments::{
    build_environment, compare_baselines, complexity_sweep, evaluate, initial_policy, negative_control, schedule_curve,
    summarize, sweep_gamma, train_policy, BaselineRow, ComplexitySweep, CurvePoint, GammaRun, NegativeControl, Rollout,
    Schedule, Summary,
};
pub use plots::export_plots;
pub use run::{prepare_run_dir, resolve_fields, VERSION};
