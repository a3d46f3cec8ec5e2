//! `respalloc`: generate interaction data, learn responsibility allocations,
//! and export plot-ready tables.

mod bench;
mod generate;
mod output;
mod train;
mod views;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "respalloc", version, about = "Learn how agents share responsibility for safety")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic or traffic-weaving dataset.
    Generate(generate::GenerateArgs),
    /// Fit a responsibility model to a dataset.
    Train(train::TrainArgs),
    /// Export a model's allocation over a grid of relative states.
    Landscape(views::LandscapeArgs),
    /// Export per-timestep allocations along one trajectory.
    Trace(views::TraceArgs),
    /// Time loss-and-gradient evaluation across batch sizes.
    Bench(bench::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Landscape(a) => views::run_landscape(a),
        Command::Trace(a) => views::run_trace(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(output::exit_code(&e))
        }
    }
}
