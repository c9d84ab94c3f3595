use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qnomp_core::harness::{emit_csv, run_experiment, EstimatorKind, ExperimentConfig};

#[derive(Parser)]
#[command(name = "qnomp", version, about = "Monte-Carlo channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML file and write a CSV of results.
    Run {
        config: PathBuf,
        /// Output CSV path (overrides `output_path`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated estimator names (overrides `estimators`).
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
    },
}

fn run(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    trials: Option<usize>,
    estimators: Option<Vec<String>>,
) -> qnomp_core::Result<()> {
    let mut ec = ExperimentConfig::load(&config)?;
    if let Some(s) = seed {
        ec.seed = s;
    }
    if let Some(t) = trials {
        ec.trials = t;
    }
    if let Some(list) = estimators {
        ec.estimators = list.iter().map(|s| s.parse::<EstimatorKind>()).collect::<Result<_, _>>()?;
    }
    if let Some(o) = out {
        ec.output_path = o;
    }
    let rows = run_experiment(&ec)?;
    emit_csv(&rows, &ec.output_path)?;
    eprintln!("wrote {} rows to {}", rows.len(), ec.output_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed, trials, estimators } => run(config, out, seed, trials, estimators),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
