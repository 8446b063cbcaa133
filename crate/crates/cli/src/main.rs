//! `dau`: train, evaluate, prune, analyse and benchmark DAU networks.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dau", version, about = "Train, evaluate, prune, analyse and benchmark DAU networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Flat `key = value` configuration file (`#` starts a comment)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory receiving every artifact
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (results do not depend on it; 1 disables parallelism)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Floating-point precision of parameters and activations
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train for `train.iterations` steps; writes history.csv and checkpoint.ckpt
    Train {
        /// Continue from a checkpoint instead of a fresh network
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Top-1 accuracy and mean loss of a checkpoint; writes eval.csv
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Evaluate the training split instead of the test split
        #[arg(long)]
        train_split: bool,
    },
    /// Remove units with small weights; writes prune.csv and pruned.ckpt
    Prune {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Relative threshold in [0, 1] (default: prune.threshold)
        #[arg(long)]
        threshold: Option<f64>,
        /// Threshold reference: layer or global (default: prune.scope)
        #[arg(long)]
        scope: Option<String>,
        /// Report the thresholds 0, 0.01, 0.02, 0.05, 0.1 and 0.25 instead
        #[arg(long)]
        sweep: bool,
    },
    /// Displacement histograms and effective receptive fields
    Analyze {
        /// Trained network; without it the configured network is freshly initialised
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Radial and planar histograms of every DAU layer: all units, then units with
        /// at least 90% and 75% of the largest absolute weight
        #[arg(long)]
        histograms: bool,
        /// Effective receptive field of `analyze.erf_layer` with contours and an SVG
        #[arg(long)]
        erf: bool,
        /// Layer for the receptive field (default: analyze.erf_layer)
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Time the efficient, rasterised and plain-convolution paths; writes bench.csv
    Bench,
    /// Finite-difference check of every gradient in double precision
    Gradcheck {
        /// Scale one group's analytic gradient by 1.01: dau_weight, dau_mu,
        /// dau_sigma, bias, input, bn, dense, maxpool or softmax_xent
        #[arg(long, value_name = "GROUP")]
        fault: Option<String>,
    },
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_IO: u8 = 5;

impl From<dau_core::Error> for Failure {
    fn from(e: dau_core::Error) -> Self {
        use dau_core::Error as E;
        let code = match &e {
            E::Config(_) | E::Build { .. } | E::Contract(_) => EXIT_USAGE,
            E::Numerical(_) | E::Oracle { .. } => EXIT_NUMERICAL,
            E::Io(_) => EXIT_IO,
            E::Dimension { .. }
            | E::Parameter(_)
            | E::Data(_)
            | E::Format { .. }
            | E::Checksum { .. }
            | E::Version { .. }
            | E::Analysis(_) => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
