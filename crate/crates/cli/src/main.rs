//! `qavat` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error (including
//! missing input files).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qavat::Error;

#[derive(Parser)]
#[command(name = "qavat", version, about = "Variability-aware quantized training and chip-population evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides the train and eval seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (1 runs serially).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write `checkpoint.qvc` and `train_log.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint over a chip population.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate 200 chips instead of the configured count.
        #[arg(long)]
        quick: bool,
    },
    /// Run the scenario table described by `[sweep]`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        quick: bool,
    },
    /// Naive versus reparameterized gradient estimates on a quadratic loss.
    BiasDemo {
        #[arg(long, default_value_t = 1.0)]
        w: f64,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Area and compute overhead of self-tuning for a model.
    Overhead {
        #[arg(long, default_value = "lenet5")]
        model: String,
        #[arg(long, default_value_t = 1)]
        ltm_columns: usize,
        #[arg(long, default_value_t = 1000)]
        n_gtm: usize,
        #[arg(long, default_value_t = 512)]
        rows: usize,
        #[arg(long, default_value_t = 512)]
        cols: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Train { common } => commands::train(&common),
        Cmd::Eval { common, checkpoint, quick } => commands::eval(&common, &checkpoint, quick),
        Cmd::Sweep { common, quick } => commands::sweep(&common, quick),
        Cmd::BiasDemo { w, t, sigma, n, seed, out } => commands::bias_demo(w, t, sigma, n, seed, out.as_deref()),
        Cmd::Overhead { model, ltm_columns, n_gtm, rows, cols } => {
            commands::overhead(&model, ltm_columns, n_gtm, rows, cols)
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::MissingFile(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
