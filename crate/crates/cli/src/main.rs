use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::Invocation;
use config::SweepAxis;
use error::CliError;

/// Simulator and theory checks for asynchronous federated optimization.
#[derive(Debug, Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML, schema = 1).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `outputs.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `ensemble.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress stdout summaries.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured scheme and write trajectory.csv and run.json.
    Simulate(Common),
    /// Compare ensemble moments with the closed-form quadratic recursions.
    OracleCheck(Common),
    /// Print convergence-bound terms and the per-policy preset table.
    Bounds(Common),
    /// Final-window loss for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// local-lr, local-steps, interval or m; overrides `sweep.axis`.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; overrides `sweep.values`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Write the synthetic logistic shards as CSV.
    GenShards(Common),
}

fn invocation(c: Common) -> Result<Invocation, CliError> {
    Invocation::load(&c.config, c.out, c.seed, c.quiet)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(c) => commands::simulate(&invocation(c)?),
        Command::OracleCheck(c) => commands::oracle_check(&invocation(c)?),
        Command::Bounds(c) => commands::bounds(&invocation(c)?),
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let axis = axis.as_deref().map(SweepAxis::parse).transpose()?;
            commands::sweep(&invocation(common)?, axis, values)
        }
        Command::GenShards(c) => commands::gen_shards(&invocation(c)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
