//! `sbrl`: train, evaluate, certify and export soft-barrier safe RL runs.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric abort, 4 certification
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "sbrl", version, about = "Safe RL with generative-model-based soft barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train policy, generative model and barrier from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoints, report and metric CSVs.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Empirical safe rate of a checkpoint's policy on the real plant.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        /// Defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `evaluation.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Practical safety-probability lower bound of a checkpoint.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `certification.pairs` of the run.
        #[arg(long)]
        pairs: Option<usize>,
        /// Defaults to `certification.retrain_steps` of the run.
        #[arg(long)]
        retrain_steps: Option<usize>,
        /// Synthetic rollouts for the bound and the Monte Carlo check.
        #[arg(long, default_value_t = sbrl_core::orchestrator::BOUND_TRAJECTORIES)]
        trajectories: usize,
        /// Defaults to `certificate.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot data from a finished run: loss curves, trajectory overlays and
    /// barrier values along trajectories.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Defaults to `<run>/export`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Paired real/synthetic episodes in the overlay.
        #[arg(long, default_value_t = 5)]
        episodes: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => commands::train(&config, &out, seed, resume.as_deref()),
        Command::Evaluate {
            checkpoint,
            episodes,
            seed,
            out,
        } => commands::evaluate(&checkpoint, episodes, seed, out.as_deref()),
        Command::Certify {
            checkpoint,
            pairs,
            retrain_steps,
            trajectories,
            out,
        } => commands::certify(&checkpoint, pairs, retrain_steps, trajectories, out.as_deref()),
        Command::Export {
            run,
            format,
            out,
            episodes,
        } => commands::export(&run, format, out.as_deref(), episodes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
