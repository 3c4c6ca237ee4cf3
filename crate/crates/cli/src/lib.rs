//! Experiment driver: configuration, run-directory layout, the six
//! commands and their CSV/SVG outputs.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod store;

pub use commands::{run, Command, RunOptions};
pub use config::ExperimentConfig;
