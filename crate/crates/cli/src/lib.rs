//! Batch driver for `convdrop`: train, evaluate, diagnose and inspect
//! networks described by a TOML experiment file.
//!
//! Exit codes: 0 on success, 1 when training diverges, a probe fails or a
//! runtime error occurs, 2 for bad configs, missing files and bad flags.
//! `CONVDROP_THREADS` caps the number of worker threads.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use convdrop::Placement;

pub use commands::{
    cmd_diagnose, cmd_eval, cmd_inspect, cmd_train, DiagnoseArgs, DiagnoseOutcome, EvalArgs, Probe, TrainArgs,
    TrainReport,
};
pub use config::ExperimentConfig;
pub use error::CliError;

pub const THREADS_ENV: &str = "CONVDROP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "convdrop", version, about = "Train and analyse convolutional networks with structured dropout")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Gradcheck,
    Bnvar,
    Ensemble,
    Droppath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    Traditional,
    Proposed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured network and write metrics, summary and checkpoint.
    Train {
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured train and test splits.
    Eval {
        config: PathBuf,
        /// Checkpoint file; defaults to `<output_dir>/model.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a numerical or statistical probe; exit 0 iff it passes.
    Diagnose {
        #[arg(long, value_enum)]
        probe: ProbeArg,
        /// Drop rate.
        #[arg(long, default_value_t = 0.25)]
        p: f64,
        /// Dropout placement relative to the convolution.
        #[arg(long, value_enum, default_value = "traditional")]
        placement: PlacementArg,
        /// Put a ReLU after the convolution in the ensemble probe.
        #[arg(long)]
        relu: bool,
        /// Monte-Carlo draws (ensemble default 100000, droppath 20000).
        #[arg(long)]
        draws: Option<usize>,
        /// Paths of the drop-path bottleneck.
        #[arg(long, default_value_t = 8)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write `diagnose-<probe>.csv` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-block parameter counts and the per-stage component census.
    Inspect { config: PathBuf },
}

/// Install the global worker pool, honouring `CONVDROP_THREADS`.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second initialisation (e.g. in tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Execute a parsed command line, print its report and return the exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    init_threads()?;
    match cli.command {
        Command::Train { config, seed, out, epochs } => {
            let r = cmd_train(&TrainArgs { config, seed, out, epochs })?;
            print!("{}", r.summary);
            println!("outputs in {}", r.out_dir.display());
            Ok(if r.aborted.is_some() { 1 } else { 0 })
        }
        Command::Eval { config, checkpoint, out } => {
            print!("{}", cmd_eval(&EvalArgs { config, checkpoint, out })?);
            Ok(0)
        }
        Command::Diagnose { probe, p, placement, relu, draws, paths, seed, out } => {
            let probe = match probe {
                ProbeArg::Gradcheck => Probe::GradCheck,
                ProbeArg::Bnvar => Probe::BnVar,
                ProbeArg::Ensemble => Probe::Ensemble,
                ProbeArg::Droppath => Probe::DropPath,
            };
            let placement = match placement {
                PlacementArg::Traditional => Placement::Traditional,
                PlacementArg::Proposed => Placement::Proposed,
            };
            let o = cmd_diagnose(&DiagnoseArgs { probe, p, placement, relu, draws, paths, seed, out })?;
            print!("{}", o.text());
            Ok(if o.pass() { 0 } else { 1 })
        }
        Command::Inspect { config } => {
            print!("{}", cmd_inspect(&config)?);
            Ok(0)
        }
    }
}
