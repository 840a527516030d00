//! Experiment harness: configuration, checkpoints, runs and reports.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{derive_seed, DatasetConfig, ExperimentConfig};
pub use experiment::{run_experiment, Experiment, MethodRow, RunRecord};
pub use report::{emit_report, write_experiment};
