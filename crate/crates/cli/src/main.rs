//! `deltaedit`: generate a synthetic world, train mappers, estimate the
//! relevance matrix, edit and evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "deltaedit", version, about = "Text-free delta mapper training and editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; missing keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed for every random choice in the run (overrides the config)
    #[arg(long)]
    seed: Option<u64>,

    /// Parent directory for run directories
    #[arg(long, default_value = "runs")]
    out: PathBuf,

    /// Reuse an existing run directory
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: dataset, text table and world description
    GenWorld {
        #[command(flatten)]
        common: Common,
        /// Number of dataset records
        #[arg(long, default_value_t = 10_000)]
        records: usize,
    },
    /// Train a mapper on one or more datasets
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset files (appended to those in the config)
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Continue from a checkpoint that holds optimizer state
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Estimate the relevance matrix against a synthetic world
    Relevance {
        #[command(flatten)]
        common: Common,
        /// world.toml written by gen-world
        #[arg(long)]
        world: PathBuf,
        /// Dataset whose style codes are the probe sources
        #[arg(long)]
        dataset: PathBuf,
        /// Per-channel sample count (overrides the config)
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Edit one dataset record with a text prompt
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text table with the prompt embeddings
        #[arg(long)]
        text: PathBuf,
        /// Dataset holding the source record
        #[arg(long)]
        dataset: PathBuf,
        /// Index of the source record
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated target attributes, e.g. "smile,eyeglasses"
        #[arg(long)]
        attrs: String,
        /// Comma-separated attributes already in the source prompt
        #[arg(long, default_value = "")]
        source_attrs: String,
        /// Relevance matrix; required when beta > 0
        #[arg(long)]
        relevance: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        strength: Option<f64>,
        /// world.toml, to score the edit against the oracle
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Score models against the synthetic world
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = EvalMode::Single)]
        mode: EvalMode,
        #[arg(long)]
        world: PathBuf,
        /// Training data for `compare` and the linear baseline
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Model to score in `single` mode
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        relevance: Option<PathBuf>,
        /// Filter threshold (overrides the config)
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Raw versus delta alignment statistics and a PCA projection
    GapStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        /// Number of single-attribute pairs to draw
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
    },
    /// Blend two edited style codes: omega * a + (1 - omega) * b
    Interpolate {
        #[command(flatten)]
        common: Common,
        /// CSV written by edit
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        omega: f64,
    },
    /// Print the header and validation report of any data file
    Inspect {
        file: PathBuf,
        /// Embedding width of a text table, if it cannot be inferred
        #[arg(long)]
        clip_dim: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Delta,
    Naive,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EvalMode {
    Single,
    Compare,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { kind, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(kind.code())
        }
    }
}
