//! fpbench: compares autoencoder pretraining procedures by probe
//! quality, FLOP cost, and wall time.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::bench::BenchOptions;
use commands::gen_data::GenDataArgs;
use config::ConfigOverrides;

#[derive(Parser)]
#[command(
    name = "fpbench",
    version,
    about = "Autoencoder pretraining lab: six procedures, probe evaluation, cost accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the frozen loss network and persist its weights.
    TrainLossnet {
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Run the full procedure x width x repeat grid with probes.
    RunExperiment {
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Tabulate analytic FLOP counts and measured epoch times.
    Benchmark {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Widths to time (comma separated); default is the first
        /// configured width.
        #[arg(long, value_delimiter = ',')]
        time_z: Option<Vec<usize>>,
        /// Timed epochs per run, after one discarded warm-up epoch.
        #[arg(long, default_value_t = 3)]
        timed_epochs: usize,
        /// Samples drawn from the pretraining set for timing.
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Train all procedures at one width under early stopping and
    /// chart normalized validation curves.
    Convergence {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Embedding width; default is the first configured width.
        #[arg(long)]
        z: Option<usize>,
    },
    /// Generate a sprite or shapes dataset file.
    GenData(GenDataArgs),
    /// Print the structure stored in a weight file.
    InspectWeights { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::TrainLossnet { overrides } => {
            let config = config::resolve(&overrides)?;
            commands::train_lossnet::run(&config)?;
            Ok(0)
        }
        Command::RunExperiment { overrides } => {
            let config = config::resolve(&overrides)?;
            commands::experiment::run(&config)
        }
        Command::Benchmark {
            overrides,
            time_z,
            timed_epochs,
            samples,
        } => {
            let config = config::resolve(&overrides)?;
            commands::bench::run(
                &config,
                &BenchOptions {
                    time_z,
                    timed_epochs,
                    samples,
                },
            )
        }
        Command::Convergence { overrides, z } => {
            let config = config::resolve(&overrides)?;
            commands::convergence::run(&config, z)
        }
        Command::GenData(args) => {
            commands::gen_data::run(&args)?;
            Ok(0)
        }
        Command::InspectWeights { path } => {
            commands::inspect::run(&path)?;
            Ok(0)
        }
    }
}
