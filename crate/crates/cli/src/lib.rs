//! Batch front-end for log-Gaussian Cox process fits: configuration, the
//! prior sensitivity sweep, simulation, prior tables and scaling checks.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod render;

pub use config::RunConfig;
pub use error::{CliError, CliResult, ErrorKind};
