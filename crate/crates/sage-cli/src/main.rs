//! `sage` command-line pipeline: synthetic benchmark generation, model
//! fitting, run scoring, and point prediction.
//!
//! Exit codes: 0 success, 2 missing input file or usage error, 3 malformed
//! data/configuration, 4 numerical or inference failure.

mod commands;

use clap::{Parser, Subcommand};
use sage_core::error::SageError;

#[derive(Parser)]
#[command(name = "sage", version, about = "Joint phase-map + property inference with baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark case: data CSVs plus a truth/ directory
    Synth(commands::SynthArgs),
    /// Fit a model and write chains, posterior CSVs, and summary.json
    Fit(commands::FitArgs),
    /// Score run directories against ground truth (Table-style grid)
    Report(commands::ReportArgs),
    /// Evaluate a saved run at new points
    Predict(commands::PredictArgs),
}

fn exit_code(err: &SageError) -> i32 {
    match err {
        SageError::Io(_) => 2,
        SageError::CsvData { .. }
        | SageError::Validation(_)
        | SageError::Dimension(_)
        | SageError::InvalidParameter(_)
        | SageError::Serde(_) => 3,
        SageError::Cholesky { .. } | SageError::Inference(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Fit(args) => commands::fit(args),
        Command::Report(args) => commands::report(args),
        Command::Predict(args) => commands::predict(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
