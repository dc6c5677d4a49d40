//! Command-line front end: ingestion, settings and the `ppp` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod input;

pub use error::{CliError, CliResult};
