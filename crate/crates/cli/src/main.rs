//! `pkpd`: generate synthetic cohorts, train, evaluate, forecast and ablate.

mod args;
mod commands;
mod exit;

use clap::Parser;

use crate::args::Cli;
use crate::exit::CliError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            CliError::config(first.trim_start_matches("error: ")).exit();
        }
    };
    if let Err(e) = commands::run(cli) {
        e.exit();
    }
}
