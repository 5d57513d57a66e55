//! Experiment harness: TOML configuration, method execution with CSV, JSON
//! and checkpoint outputs, parameter sweeps, seed-aggregated reports and the
//! `sparsesoup` command line.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod report;
pub mod sweep;

pub use cli::run_cli;
pub use config::{ConfigError, ExperimentConfig};
