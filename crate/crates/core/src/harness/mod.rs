//! Experiment harness: configuration, datasets, runs and sweeps.

pub mod config;
pub mod dataset;
pub mod model_io;
pub mod run;
pub mod sweep;

pub use config::{EffectiveSettings, ExperimentConfig, Variant};
pub use run::{run_experiment, RunOptions, RunOutput, RunSummary, Setup};
pub use sweep::{run_sweep, SweepAxis, SweepPlan};
