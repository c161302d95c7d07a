// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop, evaluation and threshold estimation.
//!
//! One step: forward (train mode) → loss and gradients → Adam on every
//! tensor → variant constraints (unit decoder rows for ReLU, `theta >= 0`
//! for JumpReLU) → dead-latent bookkeeping → BatchTopK threshold minima.
//!
//! The BatchTopK inference threshold is the exact mean of the per-batch
//! minimum positive activations over the final `threshold_window_batches`
//! steps. An exponential moving average is tracked alongside for logging.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::activations::{self, ActivationVariant, ThresholdEstimate};
use crate::checkpoint::{save_checkpoint, Checkpoint, TrainerProgress};
use crate::data::ActivationDataset;
use crate::error::{Result, SaeError};
use crate::losses::{self, DeadLatentTracker, LossBreakdown, ObjectiveConfig};
use crate::metrics::{self, L0Accumulator, MetricsReport, NmseAccumulator, NmseNormalization};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, RngState};
use crate::sae::{self, ForwardMode, SaeParams};
use crate::tensor::Matrix;

const STREAM_INIT: u64 = 10;

/// Which activation to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Relu,
    Topk,
    Batchtopk,
    Jumprelu,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Relu => "relu",
            VariantKind::Topk => "topk",
            VariantKind::Batchtopk => "batchtopk",
            VariantKind::Jumprelu => "jumprelu",
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(VariantKind::Relu),
            "topk" => Ok(VariantKind::Topk),
            "batchtopk" => Ok(VariantKind::Batchtopk),
            "jumprelu" => Ok(VariantKind::Jumprelu),
            other => Err(SaeError::Config(format!(
                "unknown variant {other:?} (relu, topk, batchtopk, jumprelu)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: VariantKind,
    pub d: usize,
    /// Dictionary size.
    pub m: usize,
    /// Latents per sample (TopK, BatchTopK).
    pub k: Option<usize>,
    /// Sparsity coefficient (ReLU, JumpReLU).
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub k_aux: usize,
    /// JumpReLU straight-through kernel width.
    pub bandwidth: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Training stops once this many activation rows have been consumed.
    pub token_budget: u64,
    pub dead_threshold_tokens: u64,
    pub threshold_window_batches: usize,
    pub threshold_ema_decay: f64,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub center_input: bool,
    /// Rescale inputs by a fixed scalar so the first batch has mean squared
    /// norm `d`.
    pub normalize_input: bool,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn new(variant: VariantKind, d: usize, m: usize) -> Self {
        Self {
            variant,
            d,
            m,
            k: None,
            lambda: None,
            alpha: losses::DEFAULT_ALPHA,
            k_aux: losses::DEFAULT_K_AUX,
            bandwidth: 0.001,
            lr: crate::optim::DEFAULT_LR,
            beta1: crate::optim::DEFAULT_BETA1,
            beta2: crate::optim::DEFAULT_BETA2,
            adam_eps: crate::optim::DEFAULT_EPS,
            batch_size: 4096,
            token_budget: 2_000_000,
            dead_threshold_tokens: 1_000_000,
            threshold_window_batches: 100,
            threshold_ema_decay: 0.999,
            seed: 0,
            grad_clip: None,
            center_input: false,
            normalize_input: false,
            checkpoint_every: None,
            checkpoint_path: None,
            log_every: 1,
        }
    }

    /// Shorthand for a TopK or BatchTopK configuration.
    pub fn with_k(variant: VariantKind, d: usize, m: usize, k: usize) -> Self {
        Self {
            k: Some(k),
            ..Self::new(variant, d, m)
        }
    }

    /// Shorthand for a ReLU or JumpReLU configuration.
    pub fn with_lambda(variant: VariantKind, d: usize, m: usize, lambda: f64) -> Self {
        Self {
            lambda: Some(lambda),
            ..Self::new(variant, d, m)
        }
    }

    pub fn activation(&self) -> Result<ActivationVariant> {
        let need_k = || {
            self.k
                .ok_or_else(|| SaeError::Config(format!("variant {} requires k", self.variant)))
        };
        Ok(match self.variant {
            VariantKind::Relu => ActivationVariant::Relu,
            VariantKind::Topk => ActivationVariant::TopK { k: need_k()? },
            VariantKind::Batchtopk => ActivationVariant::BatchTopK { k: need_k()? },
            VariantKind::Jumprelu => ActivationVariant::JumpRelu {
                bandwidth: self.bandwidth,
            },
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda.unwrap_or(0.0),
            alpha: self.alpha,
            k_aux: self.k_aux,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SaeError::Config(m));
        match self.variant {
            VariantKind::Topk | VariantKind::Batchtopk => {
                if self.lambda.is_some() {
                    return err(format!(
                        "lambda does not apply to {}: sparsity is set by k",
                        self.variant
                    ));
                }
                if self.k.is_none() {
                    return err(format!("{} requires k", self.variant));
                }
            }
            VariantKind::Relu | VariantKind::Jumprelu => {
                if self.k.is_some() {
                    return err(format!(
                        "k does not apply to {}: sparsity is set by lambda",
                        self.variant
                    ));
                }
                match self.lambda {
                    Some(l) if l >= 0.0 && l.is_finite() => {}
                    Some(l) => return err(format!("lambda must be >= 0, got {l}")),
                    None => return err(format!("{} requires lambda", self.variant)),
                }
            }
        }
        if self.d == 0 || self.m == 0 {
            return err("d and m must be >= 1".into());
        }
        if self.batch_size == 0 || self.k_aux == 0 || self.log_every == 0 {
            return err("batch_size, k_aux and log_every must be >= 1".into());
        }
        if self.threshold_window_batches == 0 || self.dead_threshold_tokens == 0 {
            return err("threshold_window_batches and dead_threshold_tokens must be >= 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.threshold_ema_decay) {
            return err("threshold_ema_decay must lie in [0, 1)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return err(format!("grad_clip must be > 0, got {c}"));
            }
        }
        if self.checkpoint_every.is_some() != self.checkpoint_path.is_some() {
            return err("checkpoint_every and checkpoint_path go together".into());
        }
        if self.checkpoint_every == Some(0) {
            return err("checkpoint_every must be >= 1".into());
        }
        self.adam().validate()?;
        self.activation()?.validate(self.m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub loss: LossBreakdown,
    /// Mean selected entries per sample (before the ReLU on kept values).
    pub mean_l0: f64,
    /// Mean strictly positive latents per sample.
    pub mean_active_l0: f64,
    pub dead_count: usize,
    pub ema_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    /// One JSON object per line: `{"kind":"step",...}` or
    /// `{"kind":"warning","message":...}`.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for s in &self.steps {
            let mut v = serde_json::to_value(s)?;
            v.as_object_mut()
                .expect("struct serializes to object")
                .insert("kind".into(), "step".into());
            writeln!(out, "{}", serde_json::to_string(&v)?)?;
        }
        for w in &self.warnings {
            let v = serde_json::json!({ "kind": "warning", "message": w });
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Full mutable state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub params: SaeParams,
    pub adam: Vec<AdamState>,
    pub input_scale: f64,
    pub progress: TrainerProgress,
}

impl TrainerState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(derive_seed(cfg.seed, STREAM_INIT, 0));
        let mut params = sae::init_params(&mut rng, cfg.d, cfg.m, cfg.activation()?)?;
        params.center_input = cfg.center_input;
        let adam = params
            .tensors()
            .iter()
            .map(|(_, t)| AdamState::for_param(t, cfg.adam()))
            .collect();
        Ok(Self {
            params,
            adam,
            input_scale: 1.0,
            progress: TrainerProgress {
                step: 0,
                tokens_seen: 0,
                tracker: DeadLatentTracker::new(cfg.m, cfg.dead_threshold_tokens),
                minima_window: Vec::new(),
                ema_threshold: None,
            },
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let progress = ck.progress.ok_or_else(|| {
            SaeError::Format("checkpoint has no trainer section; cannot resume".into())
        })?;
        if ck.adam.is_empty() {
            return Err(SaeError::Format(
                "checkpoint has no optimizer section; cannot resume".into(),
            ));
        }
        Ok(Self {
            params: ck.params,
            adam: ck.adam,
            input_scale: ck.input_scale,
            progress,
        })
    }

    /// BatchTopK threshold from the stored window (None for other variants).
    pub fn threshold(&self) -> Option<ThresholdEstimate> {
        matches!(self.params.variant, ActivationVariant::BatchTopK { .. })
            .then(|| ThresholdEstimate::from_minima(&self.progress.minima_window))
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            lambda: cfg.lambda,
            input_scale: self.input_scale,
            threshold: self.threshold(),
            adam: self.adam.clone(),
            progress: Some(self.progress.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: SaeParams,
    /// Present for BatchTopK.
    pub threshold: Option<ThresholdEstimate>,
    pub log: TrainLog,
    pub state: TrainerState,
}

/// Trains from scratch.
pub fn train(cfg: &TrainConfig, data: ActivationDataset) -> Result<TrainOutput> {
    let state = TrainerState::init(cfg)?;
    run(cfg, &data, state)
}

/// Continues a run from a saved state; the data stream is advanced past the
/// batches already consumed.
pub fn resume(
    cfg: &TrainConfig,
    data: ActivationDataset,
    state: TrainerState,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if state.params.variant != cfg.activation()?
        || state.params.d() != cfg.d
        || state.params.m() != cfg.m
    {
        return Err(SaeError::Config(
            "checkpoint does not match the training configuration".into(),
        ));
    }
    run(cfg, &data, state)
}

fn first_nonfinite(loss: &LossBreakdown) -> Option<&'static str> {
    [
        ("recon", loss.recon),
        ("sparsity", loss.sparsity),
        ("aux", loss.aux),
        ("total", loss.total),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(n, _)| n)
}

fn run(
    cfg: &TrainConfig,
    data: &ActivationDataset,
    mut state: TrainerState,
) -> Result<TrainOutput> {
    if data.d() != cfg.d {
        return Err(SaeError::Config(format!(
            "data has width {}, config expects d={}",
            data.d(),
            cfg.d
        )));
    }
    let data = data.clone().with_batch_size(cfg.batch_size)?;
    let mut log = TrainLog::default();
    let obj = cfg.objective();
    let is_batchtopk = matches!(state.params.variant, ActivationVariant::BatchTopK { .. });
    let mut window: VecDeque<f64> = state.progress.minima_window.drain(..).collect();

    let mut stream = data.batches()?;
    stream.skip_batches(state.progress.step)?;

    if cfg.normalize_input && state.progress.step == 0 && cfg.token_budget > 0 {
        let probe = data.batches()?.next().transpose()?;
        if let Some(b) = probe {
            let mean_sq = b.data.frobenius_sq() / b.data.rows().max(1) as f64;
            if mean_sq > 0.0 {
                state.input_scale = (cfg.d as f64 / mean_sq).sqrt();
            }
        }
    }

    while state.progress.tokens_seen < cfg.token_budget {
        let Some(batch) = stream.next_batch()? else {
            let msg = format!(
                "data exhausted after {} tokens, before the budget of {}",
                state.progress.tokens_seen, cfg.token_budget
            );
            warn!("{msg}");
            log.warnings.push(msg);
            break;
        };
        let step = state.progress.step + 1;
        let x = if state.input_scale != 1.0 {
            batch.data.scale(state.input_scale)?
        } else {
            batch.data
        };
        let b = x.rows();
        let p = &mut state.params;
        let trace = sae::forward(p, &x, ForwardMode::Train, None)?;
        let (loss, mut grads) = losses::objective(&x, &trace, &state.progress.tracker, p, obj)?;
        if let Some(term) = first_nonfinite(&loss) {
            return Err(SaeError::NonFiniteLoss { step, term });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        for ((param, grad), opt) in p
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(state.adam.iter_mut())
        {
            opt.step(param, grad)?;
        }
        if let Some(theta) = p.theta.as_mut() {
            theta.data_mut().iter_mut().for_each(|t| *t = t.max(0.0));
        }
        if matches!(p.variant, ActivationVariant::Relu) {
            sae::normalize_decoder(p)?;
        }

        let pr = &mut state.progress;
        pr.tracker.update(&trace.latents);
        pr.step = step;
        pr.tokens_seen += b as u64;
        if is_batchtopk {
            if let Some(min) = activations::min_positive(&trace.latents) {
                if window.len() == cfg.threshold_window_batches {
                    window.pop_front();
                }
                window.push_back(min);
                let d = cfg.threshold_ema_decay;
                pr.ema_threshold = Some(match pr.ema_threshold {
                    None => min,
                    Some(e) => d * e + (1.0 - d) * min,
                });
            }
        }
        if (step - 1).is_multiple_of(cfg.log_every) {
            let bf = b.max(1) as f64;
            log.steps.push(StepRecord {
                step,
                tokens_seen: pr.tokens_seen,
                loss,
                mean_l0: trace.kept_mask.data().iter().sum::<f64>() / bf,
                mean_active_l0: trace.latents.data().iter().filter(|&&v| v > 0.0).count() as f64
                    / bf,
                dead_count: pr.tracker.dead_count(),
                ema_threshold: pr.ema_threshold,
            });
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &cfg.checkpoint_path) {
            if step.is_multiple_of(every) {
                state.progress.minima_window = window.iter().copied().collect();
                save_checkpoint(path, &state.to_checkpoint(cfg))?;
                state.progress.minima_window.clear();
                info!("step {step}: checkpoint written to {}", path.display());
            }
        }
    }
    if cfg.token_budget == 0 {
        let msg = "token budget is zero; returning initial parameters".to_string();
        warn!("{msg}");
        log.warnings.push(msg);
    }
    state.progress.minima_window = window.into_iter().collect();
    Ok(TrainOutput {
        params: state.params.clone(),
        threshold: state.threshold(),
        log,
        state,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Batches to evaluate; `None` reads the whole (finite) source.
    pub n_batches: Option<usize>,
    pub mode: ForwardMode,
    pub normalization: NmseNormalization,
    pub input_scale: f64,
    /// Ground truth for MMCS; defaults to the planted dictionary of the data.
    pub true_dict: Option<Matrix>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_batches: None,
            mode: ForwardMode::Inference,
            normalization: NmseNormalization::MeanCentered,
            input_scale: 1.0,
            true_dict: None,
        }
    }
}

/// Aggregates reconstruction and sparsity metrics over `opts.n_batches`.
///
/// In inference mode a BatchTopK model needs `theta_global`.
pub fn evaluate(
    params: &SaeParams,
    theta_global: Option<f64>,
    data: &ActivationDataset,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if data.d() != params.d() {
        return Err(SaeError::Config(format!(
            "data has width {}, model expects d={}",
            data.d(),
            params.d()
        )));
    }
    if data.len().is_none() && opts.n_batches.is_none() {
        return Err(SaeError::Config(
            "n_batches is required for an unbounded data source".into(),
        ));
    }
    let mut nmse_acc = NmseAccumulator::new(params.d());
    let mut l0 = L0Accumulator::default();
    let mut fired = BTreeSet::new();
    let limit = opts.n_batches.unwrap_or(usize::MAX);
    for batch in data.batches()?.take(limit) {
        let x = batch?.data;
        let x = if opts.input_scale != 1.0 {
            x.scale(opts.input_scale)?
        } else {
            x
        };
        let trace = sae::forward(params, &x, opts.mode, theta_global)?;
        nmse_acc.add(&x, &trace.recon)?;
        l0.add(&trace.latents);
        for row in trace.latents.row_iter() {
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    fired.insert(j);
                }
            }
        }
    }
    if nmse_acc.samples() == 0 {
        return Err(SaeError::EmptyData("no samples to evaluate".into()));
    }
    let stats = l0.finish();
    let truth = opts
        .true_dict
        .as_ref()
        .or_else(|| data.planted_dictionary().map(|p| p.dictionary()));
    let mmcs = truth.map(|t| metrics::mmcs(&params.w_dec, t)).transpose()?;
    Ok(MetricsReport {
        n_samples: nmse_acc.samples(),
        nmse: nmse_acc.finish(opts.normalization)?,
        nmse_normalization: opts.normalization,
        l0_mean: stats.mean,
        l0_variance: stats.variance,
        l0_min: stats.hist.keys().next().copied().unwrap_or(0),
        l0_max: stats.hist.keys().next_back().copied().unwrap_or(0),
        l0_hist: stats.hist,
        dead_fraction: 1.0 - fired.len() as f64 / params.m() as f64,
        theta_global: match (opts.mode, params.variant) {
            (ForwardMode::Inference, ActivationVariant::BatchTopK { .. }) => theta_global,
            _ => None,
        },
        mmcs,
        mode: match opts.mode {
            ForwardMode::Train => "train".into(),
            ForwardMode::Inference => "inference".into(),
        },
    })
}

/// Post-hoc BatchTopK threshold: mean over `n_batches` of each batch's
/// minimum positive post-selection activation.
pub fn estimate_threshold(
    params: &SaeParams,
    data: &ActivationDataset,
    n_batches: usize,
    input_scale: f64,
) -> Result<ThresholdEstimate> {
    if !matches!(params.variant, ActivationVariant::BatchTopK { .. }) {
        return Err(SaeError::Config(format!(
            "threshold estimation applies to BatchTopK, not {}",
            params.variant.name()
        )));
    }
    let mut est = ThresholdEstimate::new();
    for batch in data.batches()?.take(n_batches) {
        let x = batch?.data.scale(input_scale)?;
        let trace = sae::forward(params, &x, ForwardMode::Train, None)?;
        est.update(&trace.latents);
    }
    if est.batches_seen() == 0 {
        return Err(SaeError::NoPositiveActivations);
    }
    Ok(est)
}
