//! `mmctp`: prepare GeoLife data, train, evaluate, run ablations and
//! forecast from a CSV of fixes.

mod commands;
mod config;
mod error;
mod predict;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmctp_core::ingest::Split;
use mmctp_core::model::Variant;

use commands::{Grid, Selection};
use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "mmctp", version, about = "Multi-step GPS trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace existing outputs instead of skipping them.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Use only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Architecture variant, or `all` for every ablation variant.
    #[arg(long)]
    variant: Option<String>,
    /// Sweep input length or horizon instead of the configured m and n.
    #[arg(long, value_enum)]
    grid: Option<Grid>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, resample, filter and split raw data into the cache.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train one checkpoint per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Continue interrupted runs from their resume files.
        #[arg(long)]
        resume: bool,
    },
    /// Score checkpoints and write report.json, report.csv and predictions.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test", value_parser = ["test", "val"])]
        split: String,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Forecast the next n fixes after the m fixes in a CSV file.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Seed of the checkpoint to use; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
        /// CSV of `timestamp,lon,lat,alt` rows.
        #[arg(long)]
        input: PathBuf,
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    match &common.config {
        Some(path) => ExperimentConfig::from_file(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_variants(flag: Option<&str>, cfg: &ExperimentConfig, default_all: bool) -> Result<Vec<Variant>, CliError> {
    match flag {
        Some("all") => Ok(Variant::ALL.to_vec()),
        Some(v) => Ok(vec![v.parse()?]),
        None if default_all => Ok(Variant::ALL.to_vec()),
        None => Ok(vec![cfg.model.variant]),
    }
}

fn selection(run: &RunArgs, cfg: &mut ExperimentConfig, default_all: bool) -> Result<Selection, CliError> {
    if let Some(seed) = run.seed {
        cfg.train.seeds = vec![seed];
    }
    Ok(Selection {
        variants: parse_variants(run.variant.as_deref(), cfg, default_all)?,
        shapes: match run.grid {
            Some(g) => g.points(),
            None => vec![(cfg.model.m, cfg.model.n)],
        },
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare { common } => commands::cmd_prepare(&load_config(&common)?, common.force),
        Command::Train { common, run, resume } => {
            let mut cfg = load_config(&common)?;
            let sel = selection(&run, &mut cfg, false)?;
            commands::cmd_train(&cfg, &sel, common.force, resume)
        }
        Command::Eval { common, run, split } => {
            let mut cfg = load_config(&common)?;
            let sel = selection(&run, &mut cfg, false)?;
            let split = if split == "val" { Split::Val } else { Split::Test };
            commands::cmd_eval(&cfg, &sel, split, common.force, mmctp_core::evaluation::REPORT_CSV).map(|_| ())
        }
        Command::Ablate { common, run } => {
            let mut cfg = load_config(&common)?;
            let sel = selection(&run, &mut cfg, true)?;
            commands::cmd_ablate(&cfg, &sel, common.force)
        }
        Command::Predict { common, seed, variant, input, output } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.model.variant = v.parse()?;
            }
            let seed = seed.or(cfg.train.seeds.first().copied()).unwrap_or(1);
            predict::cmd_predict(&cfg, seed, &input, output.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let err = CliError::Usage(first);
            eprintln!("{err}");
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
