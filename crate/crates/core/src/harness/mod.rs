//! Experiment orchestration: configs, shipped environments, run artifacts
//! and the acceptance suite.

pub mod acceptance;
pub mod checks;
pub mod config;
pub mod envs;
pub mod experiment;

pub use config::{load_config, ExperimentConfig};
pub use experiment::{run_experiment, RunOutcome, Summary};
