//! Command-line driver: configuration, dataset ingestion, checkpoints and
//! the `oqat` subcommands.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use cli::run;
pub use error::{CliError, CliResult};
