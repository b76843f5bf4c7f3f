//! Experiment plumbing: configuration, metrics files, the multi-seed
//! runner and the tabular mixing oracle.

pub mod config;
pub mod metrics;
pub mod runner;
pub mod tabular;

pub use config::ExperimentConfig;
pub use runner::{run_experiment, run_seed, ExperimentReport, SeedOutput};
