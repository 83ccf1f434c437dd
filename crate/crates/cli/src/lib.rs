//! Command line driver and HTTP service for the plaque detection pipeline.

pub mod config;
pub mod error;
pub mod service;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
