//! Command-line harness for `laps-core`: binary tensor fixtures, JSON
//! reports and the `laps` subcommands.

pub mod args;
pub mod commands;
pub mod fixture;
pub mod report;

pub use args::Cli;
pub use commands::{run, CliError, Outcome};
