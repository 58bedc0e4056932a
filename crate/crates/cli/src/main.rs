//! `sqnet`: experiment harness for quantized stable networks.
//!
//! Every subcommand reads a flat `key = value` config file (see
//! `sqnet_core::config`), applies `--set key=value` overrides, and writes
//! its outputs plus a `manifest.txt` (command, config hash, seeds,
//! versions) into `--out`, so a run directory is self-describing. Outputs
//! are CSV or binary containers only; all writes go through a temp file
//! and an atomic rename.
//!
//! The only environment variable honored is `SQNET_SEED`, which overrides
//! the training seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "sqnet", version, about = "Train, analyze, and export quantized stable networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub(crate) struct ConfigArgs {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long, value_name = "FILE")]
    pub(crate) config: PathBuf,
    /// Override one config key; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub(crate) set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the config's synthetic dataset into a directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the dataset files and manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a network and write `model.sqnt` plus per-epoch metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding the generated dataset.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Report train/validation accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Paired quantized/full traces and the per-layer divergence table.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Held-out samples to trace (image task).
        #[arg(long, value_name = "N", default_value_t = 256)]
        trace_limit: usize,
    },
    /// Step-size bound table and perturbation growth of a checkpoint.
    Stability {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Export a quantization-trained checkpoint as an integer model.
    ExportInt {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Re-target the export grid to this bit width (both weights and
        /// activations); refused if the stored kernels are off that grid.
        #[arg(long, value_name = "BITS")]
        bits: Option<u32>,
    },
    /// Run an integer model over a dataset and write its logits.
    InferInt {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Integer model written by `export-int`.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Cap on samples (image) or emitted node rows (graph).
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
        /// Also diff every quantization site against this float
        /// checkpoint and write `grid_check.csv`.
        #[arg(long, value_name = "FILE")]
        check: Option<PathBuf>,
    },
    /// Merge two divergence tables into one side-by-side CSV.
    Report {
        /// First divergence CSV, optionally as `label=path`.
        left: String,
        /// Second divergence CSV, optionally as `label=path`.
        right: String,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train { config, data, out } => commands::train(&config, &data, &out),
        Command::Eval { config, data, model, out } => commands::eval(&config, &data, &model, &out),
        Command::Analyze { config, data, model, out, trace_limit } => {
            commands::analyze(&config, &data, &model, &out, trace_limit)
        }
        Command::Stability { config, data, model, out } => commands::stability(&config, &data, &model, &out),
        Command::ExportInt { config, model, out, bits } => commands::export_int(&config, &model, &out, bits),
        Command::InferInt { config, data, model, out, limit, check } => {
            commands::infer_int(&config, &data, &model, &out, limit, check.as_deref())
        }
        Command::Report { left, right, out } => commands::report(&left, &right, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
