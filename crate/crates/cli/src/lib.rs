//! Command implementations behind the `dsae` binary.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
