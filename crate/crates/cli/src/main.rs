//! `spikequant`: profile, plan, evaluate and compare from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error, 4 an
//! invariant violation (non-finite values, format overflow) during the run.

mod artifacts;
mod cli;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::commands::UsageError;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 2;
    }
    let invariant = err
        .chain()
        .filter_map(|e| e.downcast_ref::<spikequant::Error>())
        .any(spikequant::Error::is_invariant_violation);
    if invariant {
        4
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Profile(a) => commands::profile(a),
        Command::Plan(a) => commands::plan(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
