//! Experiment driver for weight-predicted networks: TOML configs, grid
//! runs, checkpoints, feature rendering and result merging.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod render;
pub mod report;
pub mod runner;

pub use checkpoint::{Checkpoint, SavedModel};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use runner::{run_experiment, ResultRow, RunOptions, RunSummary};
