//! `handcascade` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 detector transport,
//! 4 calibration infeasible.

mod commands;
mod config;
mod failure;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CalibrateArgs, DeriveArgs, EvaluateArgs, LintArgs, ReportArgs, RunArgs, SimulateArgs};
use failure::Code;

#[derive(Debug, Parser)]
#[command(name = "handcascade", version, about = "Coarse-to-fine cascade detection harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled scene manifest.
    Simulate(SimulateArgs),
    /// Build fine-stage records from coarse regions.
    DeriveFine(DeriveArgs),
    /// Run the cascade or a single model over a manifest.
    Run(RunArgs),
    /// Score decision files against a manifest.
    Evaluate(EvaluateArgs),
    /// Render saved reports.
    Report(ReportArgs),
    /// Solve oracle profiles for target accuracies.
    Calibrate(CalibrateArgs),
    /// Check an annotation manifest.
    Lint(LintArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Code::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::DeriveFine(a) => commands::derive_fine(a),
        Command::Run(a) => commands::run(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Lint(a) => commands::lint(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
