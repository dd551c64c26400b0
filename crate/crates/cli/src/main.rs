mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use mmforge::data::SplitKind;

use crate::commands::{EvaluateArgs, ForecastArgs};
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mmforge", version, about = "Multivariate time-series forecasting with MMformer and Transformer baselines")]
struct Cli {
    /// TOML configuration file; flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    /// Raw CSV for `preprocess`, processed directory for the other commands.
    #[arg(long, global = true, value_name = "PATH")]
    dataset: Option<PathBuf>,

    /// Override any configuration key, e.g. `--set model.num_layers=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitKind::Train,
            SplitArg::Val => SplitKind::Val,
            SplitArg::Test => SplitKind::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean, split, normalize and check a raw CSV.
    Preprocess,
    /// Train the configured model and save the best-validation checkpoint.
    Train,
    /// Score a checkpoint and dump its predictions.
    Evaluate {
        /// Defaults to `<output-dir>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Score in raw units instead of normalized space.
        #[arg(long)]
        denormalized: bool,
        /// Forecast lengths to score and average, e.g. `--horizons 6,12,24`.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Train and score the four-variant ablation grid.
    Ablate,
    /// Forecast one entity from a given timestamp.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        entity: String,
        /// First forecast timestamp; the lookback window ends just before it.
        #[arg(long = "from")]
        from: String,
    },
    /// Generate a synthetic dataset.
    Synth,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("MMFORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Usage(format!("MMFORGE_THREADS must be a positive integer, got {s:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let n = threads()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;

    let overrides = Overrides {
        seed: cli.seed,
        output_dir: cli.output_dir,
        set: cli.set,
    };
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if let Some(path) = cli.dataset {
        match cli.command {
            Command::Preprocess => cfg.data.raw = Some(path),
            _ => cfg.data.processed = Some(path),
        }
    }
    let force = cli.force;
    match cli.command {
        Command::Preprocess => commands::preprocess(&cfg, force),
        Command::Train => commands::train(&cfg, force),
        Command::Evaluate {
            checkpoint,
            split,
            denormalized,
            horizons,
        } => {
            cfg.eval.denormalized |= denormalized;
            if !horizons.is_empty() {
                cfg.eval.horizons = horizons;
            }
            commands::evaluate(
                &cfg,
                EvaluateArgs {
                    checkpoint,
                    split: split.into(),
                },
                force,
            )
        }
        Command::Ablate => commands::ablate(&cfg, force),
        Command::Forecast { checkpoint, entity, from } => {
            commands::forecast(&cfg, ForecastArgs { checkpoint, entity, from }, force)
        }
        Command::Synth => commands::synth(&cfg, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
