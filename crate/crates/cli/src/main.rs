// SPDX-License-Identifier: MIT OR Apache-2.0

//! `sae`: generate planted data, train, evaluate, and compare sparse
//! autoencoders.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(
    name = "sae",
    version,
    about = "Sparse autoencoder training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Write a planted sparse-dictionary dataset with ground-truth sidecars.
    Generate(GenerateArgs),
    /// Train an SAE and write a checkpoint plus a JSONL log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: NMSE, L0 statistics, dead fraction, MMCS.
    Eval(EvalArgs),
    /// Estimate the BatchTopK inference threshold from data.
    Threshold(ThresholdArgs),
    /// Evaluate several checkpoints on the same data, side by side.
    Compare(CompareArgs),
    /// Print a checkpoint summary as JSON.
    Inspect(InspectArgs),
}

/// Planted generator settings; unset flags fall back to the JSON config,
/// then to the built-in defaults.
#[derive(Args, Debug, Default, Serialize)]
pub struct PlantedFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_true: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_min: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeff_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeff_max: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output activation file; sidecars are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub n: u64,
    /// JSON generator config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub planted: PlantedFlags,
}

/// Where activations come from.
#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// `SAEACT1` activation file.
    #[arg(long, conflicts_with = "planted")]
    pub data: Option<PathBuf>,
    /// Planted generator config (JSON); samples are generated on the fly.
    #[arg(long)]
    pub planted: Option<PathBuf>,
    /// First planted sample index.
    #[arg(long, default_value_t = 0, requires = "planted")]
    pub planted_start: u64,
    /// Number of planted samples (unbounded when omitted).
    #[arg(long, requires = "planted")]
    pub n_samples: Option<u64>,
    /// Shuffle file rows with this seed.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

/// Training flags, named after the configuration fields.
#[derive(Args, Debug, Default, Serialize)]
pub struct TrainFlags {
    /// relu | topk | batchtopk | jumprelu
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Dictionary size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_aux: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dead_threshold_tokens: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_window_batches: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_ema_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_input: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize_input: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Final checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint (the token budget is the run total).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSONL log path (default: next to the checkpoint).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Train,
    Inference,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormArg {
    MeanCentered,
    Raw,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalFlags {
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    /// Batches to evaluate (whole source when omitted).
    #[arg(long)]
    pub n_batches: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Inference)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = NormArg::MeanCentered)]
    pub normalization: NormArg,
    /// Ground-truth dictionary (`SAEACT1`, one row per direction) for MMCS.
    #[arg(long)]
    pub true_dict: Option<PathBuf>,
    /// Override the stored BatchTopK threshold.
    #[arg(long)]
    pub theta_global: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output prefix: writes PREFIX.json, PREFIX.csv and PREFIX.l0_hist.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Args, Debug)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_batches: usize,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    /// Write a copy of the checkpoint carrying the new threshold.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Two or more checkpoints.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    /// Output prefix: writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match commands::run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
