//! Command-line workbench: data ingestion, checkpoints, metrics and the `dlm` subcommands.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod data;
pub mod error;
pub mod files;
pub mod metrics;
pub mod remote;

pub use commands::run;
pub use error::{CliError, CliResult};
