use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hrdiff_core::commands::{run_evaluate, run_forecast, run_generate, run_preprocess, run_sweep, run_train};
use hrdiff_core::config::RunConfig;
use hrdiff_core::experiments::SweepAxis;
use hrdiff_core::series::ActivityLabel;
use hrdiff_core::Error;

/// Activity-conditioned diffusion forecasting of wearable heart rate.
///
/// Exit codes: 0 success, 1 data or I/O error, 2 usage or configuration
/// error, 3 training diverged.
#[derive(Parser)]
#[command(name = "hrdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted sections and keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `run.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing); nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Directory of patient_NNN.csv / patient_NNN_segments.csv files.
    /// Without it, a synthetic cohort is generated from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort as ingestion and segment CSV files.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Clean and featurize a cohort; write cleaned CSVs, feature dumps and a report.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train a model, save a checkpoint and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Forecast the minutes after a history CSV with a trained checkpoint.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ingestion-format CSV of recent history; an optional `activity`
        /// column labels each minute.
        #[arg(long)]
        input: PathBuf,
        /// Activity performed during the forecast horizon.
        #[arg(long)]
        activity: ActivityLabel,
    },
    /// Forecast the test split with a trained checkpoint and report metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint written by `train` with the same model settings.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrain along one axis with everything else (including the seed) fixed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// schedule, steps, loss or all; may be repeated.
        #[arg(long, default_value = "all")]
        axis: Vec<String>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("config: {m}")),
            Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Core(other),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Diverged(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(common.seed))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Generate { common } => {
            run_generate(&load(&common)?, &common.out)?;
        }
        Command::Preprocess { common, data } => {
            run_preprocess(&load(&common)?, data.data.as_deref(), &common.out)?;
        }
        Command::Train { common, data } => {
            let report = run_train(&load(&common)?, data.data.as_deref(), &common.out)?;
            if let Some(reason) = report.diverged {
                return Err(Failure::Diverged(reason));
            }
        }
        Command::Forecast {
            common,
            checkpoint,
            input,
            activity,
        } => {
            run_forecast(&load(&common)?, &checkpoint, &input, activity, &common.out)?;
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
        } => {
            run_evaluate(&load(&common)?, data.data.as_deref(), &checkpoint, &common.out)?;
        }
        Command::Sweep { common, data, axis } => {
            let cfg = load(&common)?;
            let mut axes = Vec::new();
            for a in &axis {
                if a == "all" {
                    axes.extend(SweepAxis::ALL);
                } else {
                    axes.push(a.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?);
                }
            }
            axes.dedup();
            run_sweep(&cfg, data.data.as_deref(), &axes, &common.out)?;
        }
    }
    Ok(())
}
