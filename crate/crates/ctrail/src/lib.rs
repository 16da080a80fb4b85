//! Command-line runner, file formats and live oracle client for `ctrail-core`.

pub mod config;
pub mod csv_io;
pub mod live;
pub mod report;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig, Mode};
pub use runner::{run_experiment, RunError, RunSummary};
