// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loss terms: reconstruction, L1 / L0 sparsity, and the auxiliary
//! dead-latent reconstruction loss.
//!
//! Every term is a per-sample mean: summed over dimensions (or latents)
//! and divided by the batch size, so `lambda` and `alpha` do not depend
//! on `B`.

use serde::{Deserialize, Serialize};

use crate::activations::{self, ActivationVariant};
use crate::error::{Result, SaeError};
use crate::sae::{self, ForwardTrace, Gradients, LossWeights, SaeParams};
use crate::tensor::Matrix;

/// Default auxiliary-loss coefficient.
pub const DEFAULT_ALPHA: f64 = 1.0 / 32.0;
/// Default number of dead latents used by the auxiliary reconstruction.
pub const DEFAULT_K_AUX: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    /// Raw (unweighted) sparsity term.
    pub sparsity: f64,
    /// Raw (unweighted) auxiliary term.
    pub aux: f64,
    pub total: f64,
    pub lambda: f64,
    pub alpha: f64,
}

fn same_shape(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SaeError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// `sum ||x_i - x_hat_i||^2 / B`.
pub fn recon_loss(x: &Matrix, recon: &Matrix) -> Result<f64> {
    same_shape(x, recon, "recon_loss")?;
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let sse: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / x.rows() as f64)
}

/// Mean over samples of the row L1 norm.
pub fn l1_sparsity(latents: &Matrix) -> f64 {
    if latents.rows() == 0 {
        return 0.0;
    }
    latents.data().iter().map(|v| v.abs()).sum::<f64>() / latents.rows() as f64
}

/// Mean per-sample count of entries above their threshold, and the
/// straight-through gradient of that mean with respect to `theta`.
pub fn l0_ste_penalty(pre_acts: &Matrix, theta: &Matrix, epsilon: f64) -> Result<(f64, Matrix)> {
    let g = activations::jumprelu_pseudograds(pre_acts, theta, epsilon)?;
    let b = pre_acts.rows().max(1) as f64;
    let count = g.d_out_d_z.data().iter().sum::<f64>();
    let mut d_theta = g.d_l0_d_theta.col_sums();
    d_theta.data_mut().iter_mut().for_each(|v| *v /= b);
    Ok((count / b, d_theta))
}

/// Tokens since each latent last fired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadLatentTracker {
    tokens_since_fire: Vec<u64>,
    dead_threshold_tokens: u64,
}

impl DeadLatentTracker {
    pub fn new(m: usize, dead_threshold_tokens: u64) -> Self {
        Self {
            tokens_since_fire: vec![0; m],
            dead_threshold_tokens,
        }
    }

    pub(crate) fn from_parts(tokens_since_fire: Vec<u64>, dead_threshold_tokens: u64) -> Self {
        Self {
            tokens_since_fire,
            dead_threshold_tokens,
        }
    }

    pub fn tokens_since_fire(&self) -> &[u64] {
        &self.tokens_since_fire
    }

    pub fn dead_threshold_tokens(&self) -> u64 {
        self.dead_threshold_tokens
    }

    pub fn is_dead(&self, latent: usize) -> bool {
        self.tokens_since_fire[latent] >= self.dead_threshold_tokens
    }

    pub fn dead_indices(&self) -> Vec<usize> {
        (0..self.tokens_since_fire.len())
            .filter(|&j| self.is_dead(j))
            .collect()
    }

    pub fn dead_count(&self) -> usize {
        (0..self.tokens_since_fire.len())
            .filter(|&j| self.is_dead(j))
            .count()
    }

    /// Records one batch: latents with any `f > 0` reset to zero, all
    /// others age by the batch's row count.
    pub fn update(&mut self, latents: &Matrix) {
        let mut fired = vec![false; self.tokens_since_fire.len()];
        for row in latents.row_iter() {
            for (f, &v) in fired.iter_mut().zip(row) {
                *f |= v > 0.0;
            }
        }
        let rows = latents.rows() as u64;
        for (c, f) in self.tokens_since_fire.iter_mut().zip(fired) {
            *c = if f { 0 } else { c.saturating_add(rows) };
        }
    }
}

/// Value and gradient of the auxiliary dead-latent loss.
#[derive(Clone, Debug)]
pub struct AuxLoss {
    pub value: f64,
    /// Unscaled (alpha not applied). Only dead-latent columns of the
    /// encoder and dead rows of the decoder are non-zero.
    pub grads: Gradients,
    /// Per-sample selected dead latents; kept for inspection and tests.
    pub selection: Matrix,
}

/// Auxiliary reconstruction of the main-path residual from dead latents.
///
/// `e = x - x_hat` is held constant. For each sample the top
/// `min(k_aux, #dead)` dead pre-activations are kept (ReLU applied) and
/// decoded without `b_dec`; the loss is `sum ||e_i - e_hat_i||^2 / B`.
pub fn aux_dead_latent_loss(
    x: &Matrix,
    trace: &ForwardTrace,
    tracker: &DeadLatentTracker,
    params: &SaeParams,
    k_aux: usize,
) -> Result<AuxLoss> {
    if k_aux == 0 {
        return Err(SaeError::InvalidArgument("k_aux must be >= 1".into()));
    }
    same_shape(x, &trace.recon, "aux_dead_latent_loss")?;
    let (b, m) = (x.rows(), params.m());
    let mut grads = Gradients::zeros_like(params);
    let mut selection = Matrix::zeros(b, m);
    let dead = tracker.dead_indices();
    if dead.is_empty() || b == 0 {
        return Ok(AuxLoss {
            value: 0.0,
            grads,
            selection,
        });
    }
    let k_eff = k_aux.min(dead.len());
    let z = &trace.pre_acts;

    // Select per sample among dead columns, descending, lower index on ties.
    let mut acts = Matrix::zeros(b, m);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(dead.len());
    for i in 0..b {
        scratch.clear();
        scratch.extend(dead.iter().map(|&j| (z.get(i, j), j)));
        if k_eff < scratch.len() {
            scratch
                .select_nth_unstable_by(k_eff - 1, |a, c| c.0.total_cmp(&a.0).then(a.1.cmp(&c.1)));
        }
        for &(v, j) in &scratch[..k_eff] {
            selection.set(i, j, 1.0);
            if v > 0.0 {
                acts.set(i, j, v);
            }
        }
    }

    let residual = x.sub(&trace.recon)?;
    let e_hat = acts.matmul(&params.w_dec)?;
    let diff = residual.sub(&e_hat)?;
    let inv_b = 1.0 / b as f64;
    let value = diff.frobenius_sq() * inv_b;

    // dL/de_hat = -2 (e - e_hat) / B
    let d_ehat = diff.scale(-2.0 * inv_b)?;
    grads.g_w_dec = acts.t_matmul(&d_ehat)?;
    let mut dz = Matrix::zeros(b, m);
    for i in 0..b {
        let g = d_ehat.row(i);
        for &j in &dead {
            if acts.get(i, j) > 0.0 {
                let v: f64 = g.iter().zip(params.w_dec.row(j)).map(|(a, w)| a * w).sum();
                dz.set(i, j, v);
            }
        }
    }
    let x_in = params.encoder_input(x)?;
    sae::accumulate_encoder_grads(params, &x_in, &dz, &mut grads)?;
    Ok(AuxLoss {
        value,
        grads,
        selection,
    })
}

/// Hyperparameters of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub k_aux: usize,
}

/// Loss terms for a train-mode trace.
///
/// ReLU: `recon + lambda * L1`. TopK / BatchTopK: `recon + alpha * aux`.
/// JumpReLU: `recon + lambda * L0`.
pub fn total_loss(
    x: &Matrix,
    trace: &ForwardTrace,
    tracker: &DeadLatentTracker,
    params: &SaeParams,
    cfg: ObjectiveConfig,
) -> Result<LossBreakdown> {
    Ok(objective_inner(x, trace, tracker, params, cfg, false)?.0)
}

/// Loss terms and their gradients.
pub fn objective(
    x: &Matrix,
    trace: &ForwardTrace,
    tracker: &DeadLatentTracker,
    params: &SaeParams,
    cfg: ObjectiveConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let (loss, grads) = objective_inner(x, trace, tracker, params, cfg, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn objective_inner(
    x: &Matrix,
    trace: &ForwardTrace,
    tracker: &DeadLatentTracker,
    params: &SaeParams,
    cfg: ObjectiveConfig,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let recon = recon_loss(x, &trace.recon)?;
    let (lambda, alpha) = match params.variant {
        ActivationVariant::Relu | ActivationVariant::JumpRelu { .. } => (cfg.lambda, 0.0),
        ActivationVariant::TopK { .. } | ActivationVariant::BatchTopK { .. } => (0.0, cfg.alpha),
    };
    let sparsity = match params.variant {
        ActivationVariant::Relu => l1_sparsity(&trace.latents),
        ActivationVariant::JumpRelu { bandwidth } => {
            let theta = params.theta.as_ref().ok_or(SaeError::MissingThreshold)?;
            l0_ste_penalty(&trace.pre_acts, theta, bandwidth)?.0
        }
        _ => 0.0,
    };
    let mut grads = if with_grads {
        Some(sae::backward(
            params,
            x,
            trace,
            LossWeights { lambda, alpha },
        )?)
    } else {
        None
    };
    let aux = match params.variant {
        ActivationVariant::TopK { .. } | ActivationVariant::BatchTopK { .. }
            if alpha != 0.0 && tracker.dead_count() > 0 =>
        {
            let a = aux_dead_latent_loss(x, trace, tracker, params, cfg.k_aux)?;
            if let Some(g) = grads.as_mut() {
                g.add_scaled(&a.grads, alpha)?;
            }
            a.value
        }
        _ => 0.0,
    };
    let loss = LossBreakdown {
        recon,
        sparsity,
        aux,
        total: recon + lambda * sparsity + alpha * aux,
        lambda,
        alpha,
    };
    Ok((loss, grads))
}
