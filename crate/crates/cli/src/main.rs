//! `dynasel`: clean-sample selection experiments from a TOML config.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 config error,
//! 3 data or log format error, 4 numerical failure.

mod commands;
mod config;
mod error;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynasel::selection::Strategy;

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "dynasel", version, about = "Select clean training instances from learning dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated prediction log and its clean mask.
    Simulate(Common),
    /// Write the configured dataset with label noise applied.
    InjectNoise(Common),
    /// Train and select over the configured rounds, resuming if interrupted.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seed-shifted repetitions, run concurrently.
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Also run the small-loss and ratio baselines.
        #[arg(long)]
        compare: bool,
        /// Ignore any saved state in the output directory.
        #[arg(long)]
        fresh: bool,
    },
    /// Select from an existing prediction log.
    Select {
        #[arg(long)]
        log: PathBuf,
        /// Config supplying [rounds] and [fit]; defaults otherwise.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long, short)]
        output_dir: Option<PathBuf>,
        /// Keep this fraction of lowest scores instead of the mixture cut.
        #[arg(long, conflicts_with = "small_loss")]
        ratio: Option<f64>,
        /// Keep this fraction of lowest final-epoch losses.
        #[arg(long)]
        small_loss: Option<f64>,
        /// Clean-mask CSV (or log with true labels) for precision and recall.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Precision and recall of a selected-id list.
    Eval {
        #[arg(long)]
        selected: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: usize,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate trend, statistics and histogram files of a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(common) => commands::simulate(&load(&common)?),
        Command::InjectNoise(common) => commands::inject_noise(&load(&common)?),
        Command::Run { common, rounds, epochs, trials, compare, fresh } => {
            let mut cfg = load(&common)?;
            if let Some(r) = rounds {
                cfg.rounds.rounds = r;
            }
            if let Some(e) = epochs {
                cfg.rounds.epochs = e;
            }
            cfg.validate()?;
            let opts = run::RunOptions { fresh, compare };
            match trials {
                0 => Err(CliError::Config("--trials must be at least 1".into())),
                1 => run::run(&cfg, opts).map(|_| ()),
                n => run::run_trials(&cfg, n, opts),
            }
        }
        Command::Select { log, config, output_dir, ratio, small_loss, truth, round } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::parse("")?,
            };
            if let Some(dir) = output_dir {
                cfg.output_dir = Some(dir);
            }
            if let Some(r) = ratio {
                cfg.rounds.strategy = Strategy::Ratio(r);
            }
            if let Some(r) = small_loss {
                cfg.rounds.strategy = Strategy::SmallLoss(r);
            }
            cfg.validate()?;
            let args = commands::SelectArgs { log: &log, truth: truth.as_deref(), round };
            commands::select(&cfg, &args)
        }
        Command::Eval { selected, truth, round, out } => commands::eval(&selected, &truth, round, out.as_deref()),
        Command::Report { dir, bins } => run::report(&dir, bins),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
