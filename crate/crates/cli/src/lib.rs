//! Command-line driver: run configuration, run directories and the
//! `spindiff` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod run_dir;

pub use error::{CliError, CliResult};
