use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use citras::cli;

#[derive(Parser)]
#[command(
    name = "citras",
    version,
    about = "Covariate-informed patch transformer for time-series forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus training history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split (MSE/MAE per horizon).
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Produce a rolling forecast from the final test window.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the full model against its mechanism ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Export cross-variate attention traces for one test window.
    InspectAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure attention-kernel operation counts across model sizes.
    ProbeComplexity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> citras::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            out,
            threads,
        } => {
            let mut cfg = cli::parse_config(&config)?;
            if let Some(t) = threads {
                cfg.threads = t.max(1);
            }
            cli::run_train(&cfg, out.as_deref())
        }
        Command::Evaluate {
            config,
            checkpoint,
            out,
            threads,
        } => {
            let mut cfg = cli::parse_config(&config)?;
            if let Some(t) = threads {
                cfg.threads = t.max(1);
            }
            cli::run_evaluate(&cfg, &checkpoint, out.as_deref())
        }
        Command::Forecast {
            config,
            checkpoint,
            out,
        } => {
            let cfg = cli::parse_config(&config)?;
            cli::run_forecast(&cfg, &checkpoint, out.as_deref())
        }
        Command::Ablate {
            config,
            out,
            threads,
        } => {
            let mut cfg = cli::parse_config(&config)?;
            if let Some(t) = threads {
                cfg.threads = t.max(1);
            }
            cli::run_ablate(&cfg, out.as_deref())
        }
        Command::InspectAttention {
            config,
            checkpoint,
            out,
        } => {
            let cfg = cli::parse_config(&config)?;
            cli::run_inspect_attention(&cfg, &checkpoint, out.as_deref())
        }
        Command::ProbeComplexity { config, out } => {
            let cfg = cli::parse_config(&config)?;
            cli::run_probe_complexity(&cfg, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
