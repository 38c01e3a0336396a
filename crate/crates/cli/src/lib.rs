//! Command-line front end for the kNet pipeline: configuration, stage
//! runners and the end-to-end toy reproduction.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::CliError;
