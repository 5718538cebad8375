//! Experiment configuration and pipeline commands.

pub mod config;

pub use config::ExperimentConfig;
