//! Command-line front end for `spatboost`: file ingestion, configuration
//! and the `fit`, `report`, `simulate` and `test-spatial` subcommands.

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "spatboost",
    version,
    about = "Boosted trees with a spatial CAR residual field for panel data"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the two-stage model and write model, diagnostics and interpretation files.
    Fit(Box<commands::fit::FitArgs>),
    /// Importance, partial dependence and interaction files for a saved model.
    Report(commands::report::ReportArgs),
    /// Generate a synthetic panel with a known signal and planted spatial fields.
    Simulate(commands::simulate::SimulateArgs),
    /// Moran's I per time slot for one column.
    TestSpatial(commands::test_spatial::TestSpatialArgs),
}

/// Runs a parsed command line; errors are printed and mapped to exit code 1.
pub fn run(cli: &Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Fit(a) => commands::fit::run(a),
        Command::Report(a) => commands::report::run(a),
        Command::Simulate(a) => commands::simulate::run(a),
        Command::TestSpatial(a) => commands::test_spatial::run(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
