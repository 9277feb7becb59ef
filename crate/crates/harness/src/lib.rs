//! Experiment harness: synthetic data, configuration, cached training runs,
//! evaluation, sweeps and report files.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use sweep::{run_alpha_sweep, SweepOutcome};
