// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE parameters, forward pass and hand-derived backward pass.
//!
//! ```text
//! z     = x W_enc + b_enc          (B x m pre-activations)
//! f     = act(z)                   (B x m latents, >= 0)
//! x_hat = f W_dec + b_dec          (B x d reconstruction)
//! ```
//!
//! With `center_input` set, the encoder sees `x - b_dec` instead of `x`.
//!
//! The backward pass differentiates the reconstruction term plus the
//! variant's sparsity term. Selection masks (TopK, BatchTopK) are treated
//! as constants; JumpReLU uses the rectangle-kernel straight-through
//! estimator from [`crate::activations::jumprelu_pseudograds`]. The
//! auxiliary dead-latent term lives in [`crate::losses`].

use crate::activations::{self, ste_kernel, ActivationVariant};
use crate::error::{Result, SaeError};
use crate::rng::RngState;
use crate::tensor::{gauss_matrix, Matrix};

/// Initial per-latent JumpReLU threshold.
pub const THETA_INIT: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    /// `d x m`.
    pub w_enc: Matrix,
    /// `1 x m`.
    pub b_enc: Matrix,
    /// `m x d`; row `j` is the direction of latent `j`.
    pub w_dec: Matrix,
    /// `1 x d`.
    pub b_dec: Matrix,
    /// `1 x m` learned thresholds, JumpReLU only.
    pub theta: Option<Matrix>,
    pub variant: ActivationVariant,
    /// Subtract `b_dec` from the input before encoding.
    pub center_input: bool,
}

impl SaeParams {
    /// Input dimension.
    pub fn d(&self) -> usize {
        self.w_enc.rows()
    }

    /// Dictionary size.
    pub fn m(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.d(), self.m());
        let expect = [
            ("w_dec", self.w_dec.shape(), (m, d)),
            ("b_enc", self.b_enc.shape(), (1, m)),
            ("b_dec", self.b_dec.shape(), (1, d)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(SaeError::Format(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        match (&self.variant, &self.theta) {
            (ActivationVariant::JumpRelu { .. }, Some(t)) if t.shape() == (1, m) => {}
            (ActivationVariant::JumpRelu { .. }, _) => {
                return Err(SaeError::Format("JumpReLU needs a 1 x m theta".into()))
            }
            (_, Some(_)) => {
                return Err(SaeError::Format(
                    "theta is only meaningful for JumpReLU".into(),
                ))
            }
            _ => {}
        }
        self.variant.validate(m)?;
        for (name, t) in self.tensors() {
            if !t.is_finite() {
                return Err(SaeError::Format(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Named view over all trainable tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![
            ("w_enc", &self.w_enc),
            ("b_enc", &self.b_enc),
            ("w_dec", &self.w_dec),
            ("b_dec", &self.b_dec),
        ];
        if let Some(t) = &self.theta {
            v.push(("theta", t));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.w_enc,
            &mut self.b_enc,
            &mut self.w_dec,
            &mut self.b_dec,
        ];
        if let Some(t) = &mut self.theta {
            v.push(t);
        }
        v
    }

    /// Encoder input for a batch (`x` or `x - b_dec`).
    pub fn encoder_input(&self, x: &Matrix) -> Result<Matrix> {
        if self.center_input {
            x.sub(&broadcast_rows(&self.b_dec, x.rows()))
        } else {
            Ok(x.clone())
        }
    }

    /// `x W_enc + b_enc`.
    pub fn pre_activations(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d() {
            return Err(SaeError::ShapeMismatch {
                op: "forward",
                left: x.shape(),
                right: self.w_enc.shape(),
            });
        }
        self.encoder_input(x)?
            .matmul(&self.w_enc)?
            .add_row_broadcast(&self.b_enc)
    }

    /// `f W_dec + b_dec`.
    pub fn decode(&self, latents: &Matrix) -> Result<Matrix> {
        latents.matmul(&self.w_dec)?.add_row_broadcast(&self.b_dec)
    }
}

fn broadcast_rows(row: &Matrix, n: usize) -> Matrix {
    let mut data = Vec::with_capacity(n * row.cols());
    for _ in 0..n {
        data.extend_from_slice(row.data());
    }
    Matrix::new(n, row.cols(), data).expect("finite row")
}

/// Unit-norm gaussian decoder rows, encoder tied to the decoder transpose,
/// zero biases, and JumpReLU thresholds at [`THETA_INIT`].
pub fn init_params(
    rng: &mut RngState,
    d: usize,
    m: usize,
    variant: ActivationVariant,
) -> Result<SaeParams> {
    if d == 0 || m == 0 {
        return Err(SaeError::InvalidArgument(format!(
            "d and m must be >= 1, got d={d} m={m}"
        )));
    }
    variant.validate(m)?;
    let mut w_dec = gauss_matrix(rng, m, d, 1.0)?;
    // A gaussian row of exactly zero norm has probability zero; redraw anyway.
    while w_dec.row_norms().data().contains(&0.0) {
        w_dec = gauss_matrix(rng, m, d, 1.0)?;
    }
    normalize_rows(&mut w_dec)?;
    let theta = matches!(variant, ActivationVariant::JumpRelu { .. })
        .then(|| Matrix::filled(1, m, THETA_INIT));
    Ok(SaeParams {
        w_enc: w_dec.transpose(),
        b_enc: Matrix::zeros(1, m),
        w_dec,
        b_dec: Matrix::zeros(1, d),
        theta,
        variant,
        center_input: false,
    })
}

fn normalize_rows(w: &mut Matrix) -> Result<()> {
    for r in 0..w.rows() {
        let row = w.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(SaeError::DegenerateLatent { row: r });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

/// Rescales every decoder row to unit L2 norm.
pub fn normalize_decoder(params: &mut SaeParams) -> Result<()> {
    normalize_rows(&mut params.w_dec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    /// BatchTopK switches to a global-threshold JumpReLU; other variants
    /// behave as in training.
    Inference,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub pre_acts: Matrix,
    pub latents: Matrix,
    /// 1 where the activation selected (or passed) the entry.
    pub kept_mask: Matrix,
    pub recon: Matrix,
    pub mode: ForwardMode,
}

pub fn forward(
    params: &SaeParams,
    x: &Matrix,
    mode: ForwardMode,
    theta_global: Option<f64>,
) -> Result<ForwardTrace> {
    let z = params.pre_activations(x)?;
    let (latents, kept_mask) = match params.variant {
        ActivationVariant::Relu => {
            let mask = z.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            (activations::relu(&z), mask)
        }
        ActivationVariant::TopK { k } => activations::topk_per_sample(&z, k)?,
        ActivationVariant::BatchTopK { k } => match mode {
            ForwardMode::Train => activations::batch_topk(&z, k)?,
            ForwardMode::Inference => {
                let theta = theta_global.ok_or(SaeError::MissingThreshold)?;
                let mask = z.map(|v| if v > theta { 1.0 } else { 0.0 });
                (activations::global_threshold(&z, theta), mask)
            }
        },
        ActivationVariant::JumpRelu { .. } => {
            let theta = params.theta.as_ref().ok_or(SaeError::MissingThreshold)?;
            let f = activations::jumprelu(&z, theta)?;
            let mut mask = Matrix::zeros(z.rows(), z.cols());
            for r in 0..z.rows() {
                for (j, &t) in theta.data().iter().enumerate() {
                    if z.get(r, j) > t {
                        mask.set(r, j, 1.0);
                    }
                }
            }
            (f, mask)
        }
    };
    let recon = params.decode(&latents)?;
    Ok(ForwardTrace {
        pre_acts: z,
        latents,
        kept_mask,
        recon,
        mode,
    })
}

/// Gradient carriers mirroring [`SaeParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub g_w_enc: Matrix,
    pub g_b_enc: Matrix,
    pub g_w_dec: Matrix,
    pub g_b_dec: Matrix,
    pub g_theta: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &SaeParams) -> Self {
        let (d, m) = (params.d(), params.m());
        Self {
            g_w_enc: Matrix::zeros(d, m),
            g_b_enc: Matrix::zeros(1, m),
            g_w_dec: Matrix::zeros(m, d),
            g_b_dec: Matrix::zeros(1, d),
            g_theta: params.theta.as_ref().map(|_| Matrix::zeros(1, m)),
        }
    }

    /// Same order as [`SaeParams::tensors`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.g_w_enc, &self.g_b_enc, &self.g_w_dec, &self.g_b_dec];
        if let Some(t) = &self.g_theta {
            v.push(t);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.g_w_enc,
            &mut self.g_b_enc,
            &mut self.g_w_dec,
            &mut self.g_b_dec,
        ];
        if let Some(t) = &mut self.g_theta {
            v.push(t);
        }
        v
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        let others = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(SaeError::InvalidArgument(
                "gradient sets have different tensors".into(),
            ));
        }
        for (a, b) in mine.into_iter().zip(others) {
            if a.shape() != b.shape() {
                return Err(SaeError::ShapeMismatch {
                    op: "Gradients::add_scaled",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Coefficients of the sparsity and auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

fn check_trace(params: &SaeParams, x: &Matrix, trace: &ForwardTrace) -> Result<()> {
    let bm = (x.rows(), params.m());
    for (name, got, want) in [
        ("pre_acts", trace.pre_acts.shape(), bm),
        ("latents", trace.latents.shape(), bm),
        ("kept_mask", trace.kept_mask.shape(), bm),
        ("recon", trace.recon.shape(), x.shape()),
    ] {
        if got != want {
            return Err(SaeError::InvalidArgument(format!(
                "trace {name} has shape {got:?}, expected {want:?}"
            )));
        }
    }
    if trace.mode != ForwardMode::Train {
        return Err(SaeError::InvalidArgument(
            "backward needs a train-mode trace".into(),
        ));
    }
    Ok(())
}

/// Accumulates the encoder-side gradients from `dz` (`B x m`):
/// `g_w_enc += x_in^T dz`, `g_b_enc += colsum(dz)`, and, when the input is
/// centered, `g_b_dec -= colsum(dz) W_enc^T`.
pub(crate) fn accumulate_encoder_grads(
    params: &SaeParams,
    x_in: &Matrix,
    dz: &Matrix,
    grads: &mut Gradients,
) -> Result<()> {
    // dz is sparse for the selection variants; dz^T x skips zero rows of dz.
    let g_w_enc_t = dz.t_matmul(x_in)?;
    let g_w_enc = g_w_enc_t.transpose();
    let g_b_enc = dz.col_sums();
    for (a, &b) in grads.g_w_enc.data_mut().iter_mut().zip(g_w_enc.data()) {
        *a += b;
    }
    if params.center_input {
        for r in 0..params.d() {
            let dot: f64 = params
                .w_enc
                .row(r)
                .iter()
                .zip(g_b_enc.data())
                .map(|(w, g)| w * g)
                .sum();
            let v = grads.g_b_dec.get(0, r) - dot;
            grads.g_b_dec.set(0, r, v);
        }
    }
    for (a, &b) in grads.g_b_enc.data_mut().iter_mut().zip(g_b_enc.data()) {
        *a += b;
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of `recon + lambda * sparsity` for a train-mode trace.
///
/// The sparsity term is the per-sample mean L1 norm for ReLU, the
/// per-sample mean L0 count for JumpReLU, and absent for TopK/BatchTopK.
/// `weights.alpha` is ignored here; see [`crate::losses::objective`].
pub fn backward(
    params: &SaeParams,
    x: &Matrix,
    trace: &ForwardTrace,
    weights: LossWeights,
) -> Result<Gradients> {
    check_trace(params, x, trace)?;
    let b = x.rows();
    let m = params.m();
    let mut grads = Gradients::zeros_like(params);
    if b == 0 {
        return Ok(grads);
    }
    let inv_b = 1.0 / b as f64;

    // dL/dx_hat = 2 (x_hat - x) / B
    let mut d_recon = trace.recon.sub(x)?;
    d_recon
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= 2.0 * inv_b);

    grads.g_b_dec = d_recon.col_sums();
    grads.g_w_dec = trace.latents.t_matmul(&d_recon)?;

    let z = &trace.pre_acts;
    let mut dz = Matrix::zeros(b, m);
    match params.variant {
        ActivationVariant::Relu => {
            for i in 0..b {
                let dr = d_recon.row(i);
                for j in 0..m {
                    if z.get(i, j) > 0.0 {
                        let g = dot(dr, params.w_dec.row(j)) + weights.lambda * inv_b;
                        dz.set(i, j, g);
                    }
                }
            }
        }
        ActivationVariant::TopK { .. } | ActivationVariant::BatchTopK { .. } => {
            for i in 0..b {
                let dr = d_recon.row(i);
                for j in 0..m {
                    if trace.kept_mask.get(i, j) != 0.0 && z.get(i, j) > 0.0 {
                        dz.set(i, j, dot(dr, params.w_dec.row(j)));
                    }
                }
            }
        }
        ActivationVariant::JumpRelu { bandwidth } => {
            let theta = params.theta.as_ref().ok_or(SaeError::MissingThreshold)?;
            let mut g_theta = Matrix::zeros(1, m);
            for i in 0..b {
                let dr = d_recon.row(i);
                for (j, &t) in theta.data().iter().enumerate() {
                    let v = z.get(i, j);
                    let kern = ste_kernel((v - t) / bandwidth);
                    if v <= t && kern == 0.0 {
                        continue;
                    }
                    let df = dot(dr, params.w_dec.row(j));
                    if v > t {
                        dz.set(i, j, df);
                    }
                    if kern != 0.0 {
                        let g = g_theta.get(0, j)
                            - df * (t / bandwidth) * kern
                            - weights.lambda * inv_b * kern / bandwidth;
                        g_theta.set(0, j, g);
                    }
                }
            }
            grads.g_theta = Some(g_theta);
        }
    }

    let x_in = params.encoder_input(x)?;
    accumulate_encoder_grads(params, &x_in, &dz, &mut grads)?;
    if !grads.is_finite() {
        return Err(SaeError::NonFinite("backward"));
    }
    Ok(grads)
}
