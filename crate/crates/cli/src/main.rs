use std::process::ExitCode;

use clap::Parser;
use laps_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.code() as u8),
        Err(e) => {
            eprintln!("laps: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
