// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparsity-inducing activation functions and their pseudo-derivatives.
//!
//! Selection-based activations (TopK, BatchTopK) choose entries by raw
//! pre-activation value and then pass the kept entries through a ReLU, so
//! latents are always non-negative. Ties at the selection boundary go to
//! the lower row-major index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::tensor::Matrix;

/// Which activation an SAE uses.
///
/// JumpReLU's per-latent thresholds are learned parameters and live in
/// [`crate::sae::SaeParams::theta`]; the variant only carries the kernel
/// bandwidth used by the straight-through estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActivationVariant {
    Relu,
    TopK { k: usize },
    BatchTopK { k: usize },
    JumpRelu { bandwidth: f64 },
}

impl ActivationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationVariant::Relu => "relu",
            ActivationVariant::TopK { .. } => "topk",
            ActivationVariant::BatchTopK { .. } => "batchtopk",
            ActivationVariant::JumpRelu { .. } => "jumprelu",
        }
    }

    /// `k` for the selection-based variants.
    pub fn k(&self) -> Option<usize> {
        match *self {
            ActivationVariant::TopK { k } | ActivationVariant::BatchTopK { k } => Some(k),
            _ => None,
        }
    }

    pub fn validate(&self, dict_size: usize) -> Result<()> {
        match *self {
            ActivationVariant::TopK { k } | ActivationVariant::BatchTopK { k } => {
                check_k(k, dict_size)
            }
            ActivationVariant::JumpRelu { bandwidth } => check_bandwidth(bandwidth),
            ActivationVariant::Relu => Ok(()),
        }
    }
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k == 0 || k > m {
        return Err(SaeError::InvalidArgument(format!(
            "k must lie in 1..={m}, got {k}"
        )));
    }
    Ok(())
}

fn check_bandwidth(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(SaeError::InvalidArgument(format!(
            "bandwidth must be > 0, got {eps}"
        )));
    }
    Ok(())
}

/// Descending by value, ascending by index on ties.
#[inline]
fn rank_order(a: (f64, u32), b: (f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

pub fn relu(z: &Matrix) -> Matrix {
    z.map(|v| v.max(0.0))
}

/// Keeps the `k` largest entries of each row (then ReLU). Returns the
/// latents and the 0/1 selection mask; each mask row sums to exactly `k`.
pub fn topk_per_sample(z: &Matrix, k: usize) -> Result<(Matrix, Matrix)> {
    let m = z.cols();
    check_k(k, m)?;
    let mut out = Matrix::zeros(z.rows(), m);
    let mut mask = Matrix::zeros(z.rows(), m);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(m);
    for (r, row) in z.row_iter().enumerate() {
        scratch.clear();
        scratch.extend(row.iter().enumerate().map(|(j, &v)| (v, j as u32)));
        if k < m {
            scratch.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        }
        for &(v, j) in &scratch[..k] {
            let j = j as usize;
            mask.set(r, j, 1.0);
            out.set(r, j, v.max(0.0));
        }
    }
    Ok((out, mask))
}

/// Keeps the `B * k` largest entries of the whole batch (then ReLU).
/// Kept values are otherwise unchanged; the mask sums to exactly `B * k`.
pub fn batch_topk(z: &Matrix, k: usize) -> Result<(Matrix, Matrix)> {
    let m = z.cols();
    check_k(k, m)?;
    let total = z.rows() * k;
    let mut out = Matrix::zeros(z.rows(), m);
    let mut mask = Matrix::zeros(z.rows(), m);
    if total == 0 {
        return Ok((out, mask));
    }
    let mut scratch: Vec<(f64, u32)> = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i as u32))
        .collect();
    if total < scratch.len() {
        scratch.select_nth_unstable_by(total - 1, |a, b| rank_order(*a, *b));
    }
    let (mask_data, out_data) = (mask.data_mut(), out.data_mut());
    for &(v, i) in &scratch[..total] {
        mask_data[i as usize] = 1.0;
        out_data[i as usize] = v.max(0.0);
    }
    Ok((out, mask))
}

/// `z * H(z - theta)` with a per-latent threshold row `theta` (`1 x m`).
pub fn jumprelu(z: &Matrix, theta: &Matrix) -> Result<Matrix> {
    check_theta(z, theta)?;
    let th = theta.data();
    let mut out = z.clone();
    for r in 0..z.rows() {
        for (v, &t) in out.row_mut(r).iter_mut().zip(th) {
            if !(*v > t) {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Global-threshold JumpReLU used by BatchTopK at inference time.
pub fn global_threshold(z: &Matrix, theta: f64) -> Matrix {
    z.map(|v| if v > theta { v } else { 0.0 })
}

fn check_theta(z: &Matrix, theta: &Matrix) -> Result<()> {
    if theta.rows() != 1 || theta.cols() != z.cols() {
        return Err(SaeError::ShapeMismatch {
            op: "jumprelu",
            left: z.shape(),
            right: theta.shape(),
        });
    }
    if theta.data().iter().any(|&t| t < 0.0) {
        return Err(SaeError::InvalidArgument(
            "jumprelu thresholds must be >= 0".into(),
        ));
    }
    Ok(())
}

/// Straight-through kernel: rectangle of unit height on `|u| <= 1/2`.
#[inline]
pub fn ste_kernel(u: f64) -> f64 {
    if u.abs() <= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Pseudo-derivatives of JumpReLU and of its L0 count.
#[derive(Clone, Debug)]
pub struct JumpReluGrads {
    /// `H(z - theta)`.
    pub d_out_d_z: Matrix,
    /// `-(theta / eps) K((z - theta) / eps)`.
    pub d_out_d_theta: Matrix,
    /// `-(1 / eps) K((z - theta) / eps)`.
    pub d_l0_d_theta: Matrix,
}

pub fn jumprelu_pseudograds(z: &Matrix, theta: &Matrix, epsilon: f64) -> Result<JumpReluGrads> {
    check_bandwidth(epsilon)?;
    check_theta(z, theta)?;
    let (rows, cols) = z.shape();
    let mut d_z = Matrix::zeros(rows, cols);
    let mut d_th = Matrix::zeros(rows, cols);
    let mut d_l0 = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for (j, &t) in theta.data().iter().enumerate() {
            let v = z.get(r, j);
            if v > t {
                d_z.set(r, j, 1.0);
            }
            let kern = ste_kernel((v - t) / epsilon);
            if kern != 0.0 {
                d_th.set(r, j, -(t / epsilon) * kern);
                d_l0.set(r, j, -kern / epsilon);
            }
        }
    }
    Ok(JumpReluGrads {
        d_out_d_z: d_z,
        d_out_d_theta: d_th,
        d_l0_d_theta: d_l0,
    })
}

/// Smallest strictly positive entry of a batch, if any.
pub fn min_positive(z: &Matrix) -> Option<f64> {
    z.data()
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .min_by(f64::total_cmp)
}

/// Running estimate of the BatchTopK inference threshold: the mean over
/// batches of each batch's minimum positive activation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    sum: f64,
    batches_seen: u64,
}

impl ThresholdEstimate {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds an estimate from already-collected per-batch minima.
    pub fn from_minima(minima: &[f64]) -> Self {
        let mut est = Self::new();
        for &m in minima {
            est.push_minimum(m);
        }
        est
    }

    pub(crate) fn from_parts(theta_global: f64, batches_seen: u64) -> Self {
        Self {
            sum: theta_global * batches_seen as f64,
            batches_seen,
        }
    }

    /// Mean of the minima seen so far; 0 before any batch.
    pub fn theta_global(&self) -> f64 {
        if self.batches_seen == 0 {
            0.0
        } else {
            self.sum / self.batches_seen as f64
        }
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    pub fn push_minimum(&mut self, min: f64) {
        self.sum += min;
        self.batches_seen += 1;
    }

    /// Folds one post-BatchTopK latent batch into the estimate. Batches
    /// without a positive entry have no minimum and are skipped.
    pub fn update(&mut self, z_active: &Matrix) {
        if let Some(min) = min_positive(z_active) {
            self.push_minimum(min);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::gauss_matrix;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random(seed: u64, r: usize, c: usize) -> Matrix {
        gauss_matrix(&mut RngState::new(seed), r, c, 1.0).unwrap()
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&m(&[&[-1., 2.]])), m(&[&[0., 2.]]));
        assert_eq!(relu(&m(&[&[-1., -2.]])), Matrix::zeros(1, 2));
        let z = random(1, 4, 5);
        assert_eq!(relu(&relu(&z)), relu(&z));
    }

    #[test]
    fn topk_hand_cases() {
        let (out, mask) = topk_per_sample(&m(&[&[5., 1., 3.]]), 2).unwrap();
        assert_eq!(out, m(&[&[5., 0., 3.]]));
        assert_eq!(mask, m(&[&[1., 0., 1.]]));

        let (out, mask) = topk_per_sample(&m(&[&[-3., -1., -2.]]), 1).unwrap();
        assert_eq!(out, Matrix::zeros(1, 3));
        assert_eq!(mask, m(&[&[0., 1., 0.]]));
    }

    #[test]
    fn topk_rejects_bad_k() {
        let z = Matrix::zeros(2, 3);
        assert!(topk_per_sample(&z, 0).is_err());
        assert!(topk_per_sample(&z, 4).is_err());
        assert!(batch_topk(&z, 0).is_err());
        assert!(batch_topk(&z, 4).is_err());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let z = random(2, 16, 50);
        let (out, mask) = topk_per_sample(&z, 7).unwrap();
        for r in 0..16 {
            let mut idx: Vec<usize> = (0..50).collect();
            idx.sort_by(|&a, &b| {
                z.get(r, b)
                    .partial_cmp(&z.get(r, a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for (rank, &j) in idx.iter().enumerate() {
                let kept = rank < 7;
                assert_eq!(mask.get(r, j), if kept { 1.0 } else { 0.0 });
                let want = if kept { z.get(r, j).max(0.0) } else { 0.0 };
                assert_eq!(out.get(r, j), want);
            }
        }
    }

    #[test]
    fn batch_topk_hand_case() {
        let z = m(&[&[3., 1., -2.], &[0.5, 2., 0.1]]);
        let (out, mask) = batch_topk(&z, 1).unwrap();
        assert_eq!(out, m(&[&[3., 0., 0.], &[0., 2., 0.]]));
        assert_eq!(mask.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn batch_topk_identical_rows() {
        let row = [0.3, -1.0, 2.0, 0.7, 0.1];
        let z = m(&[&row, &row, &row, &row]);
        let (out, mask) = batch_topk(&z, 2).unwrap();
        for r in 0..4 {
            assert_eq!(mask.row(r), &[0., 0., 1., 1., 0.]);
            assert_eq!(out.row(r).iter().filter(|&&v| v > 0.0).count(), 2);
        }
    }

    #[test]
    fn batch_topk_tie_break_prefers_lower_index() {
        let z = m(&[&[1., 1.], &[1., 1.]]);
        let (_, mask) = batch_topk(&z, 1).unwrap();
        assert_eq!(mask, m(&[&[1., 1.], &[0., 0.]]));
    }

    #[test]
    fn batch_topk_matches_global_sort_oracle() {
        let z = random(3, 32, 100);
        let (out, mask) = batch_topk(&z, 8).unwrap();
        assert_eq!(mask.data().iter().sum::<f64>(), 256.0);
        let mut idx: Vec<usize> = (0..z.data().len()).collect();
        idx.sort_by(|&a, &b| {
            z.data()[b]
                .partial_cmp(&z.data()[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let cutoff = z.data()[idx[255]];
        for (i, &v) in z.data().iter().enumerate() {
            let kept = v > cutoff || (v == cutoff && idx[..256].contains(&i));
            assert_eq!(mask.data()[i] == 1.0, kept);
            assert_eq!(out.data()[i], if kept { v.max(0.0) } else { 0.0 });
        }
    }

    #[test]
    fn jumprelu_cases() {
        let out = jumprelu(&m(&[&[0.5, 2.0]]), &m(&[&[1., 1.]])).unwrap();
        assert_eq!(out, m(&[&[0., 2.]]));
        let z = m(&[&[0., 0.3, 1.2]]);
        assert_eq!(jumprelu(&z, &Matrix::zeros(1, 3)).unwrap(), relu(&z));
        assert!(jumprelu(&z, &m(&[&[-0.1, 0., 0.]])).is_err());
        assert!(jumprelu(&z, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn jumprelu_matches_heaviside_oracle() {
        let z = random(4, 6, 5);
        let theta = random(5, 1, 5).map(|v| v.abs() * 0.5);
        let out = jumprelu(&z, &theta).unwrap();
        for r in 0..6 {
            for j in 0..5 {
                let h = if z.get(r, j) - theta.get(0, j) > 0.0 {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(out.get(r, j), z.get(r, j) * h);
            }
        }
    }

    #[test]
    fn pseudograds_formula_points() {
        let z = m(&[&[0.5, 3.0]]);
        let theta = m(&[&[0.5, 0.5]]);
        let g = jumprelu_pseudograds(&z, &theta, 0.001).unwrap();
        assert!((g.d_out_d_theta.get(0, 0) + 500.0).abs() < 1e-9);
        assert!((g.d_l0_d_theta.get(0, 0) + 1000.0).abs() < 1e-9);
        // Far from the jump: no threshold gradient.
        assert_eq!(g.d_out_d_theta.get(0, 1), 0.0);
        assert_eq!(g.d_l0_d_theta.get(0, 1), 0.0);
        assert_eq!(g.d_out_d_z, m(&[&[0., 1.]]));
        assert!(jumprelu_pseudograds(&z, &theta, 0.0).is_err());
    }

    #[test]
    fn threshold_estimate_cases() {
        let mut est = ThresholdEstimate::new();
        est.update(&m(&[&[0.2, 0., 3.0], &[0., 1.1, 0.]]));
        assert_eq!(est.theta_global(), 0.2);
        est.update(&m(&[&[0.4, 0.9]]));
        assert!((est.theta_global() - 0.3).abs() < 1e-15);
        let before = est.clone();
        est.update(&Matrix::zeros(3, 3));
        assert_eq!(est, before);
        assert_eq!(est.batches_seen(), 2);
    }

    proptest! {
        #[test]
        fn batch_topk_single_row_equals_topk(seed in any::<u64>(), m_ in 1usize..40, k_frac in 0.0f64..1.0) {
            let k = 1 + ((m_ - 1) as f64 * k_frac) as usize;
            let z = random(seed, 1, m_);
            prop_assert_eq!(batch_topk(&z, k).unwrap(), topk_per_sample(&z, k).unwrap());
        }

        #[test]
        fn batch_topk_monotone_in_k(seed in any::<u64>(), b in 1usize..6, m_ in 2usize..20) {
            let z = random(seed, b, m_).map(|v| (v * 2.0).round() / 2.0); // force ties
            for k in 1..m_ {
                let (_, small) = batch_topk(&z, k).unwrap();
                let (_, big) = batch_topk(&z, k + 1).unwrap();
                for (s, g) in small.data().iter().zip(big.data()) {
                    prop_assert!(*s <= *g);
                }
            }
        }

        #[test]
        fn jumprelu_output_zero_or_above_threshold(seed in any::<u64>()) {
            let z = random(seed, 4, 6);
            let theta = random(seed ^ 9, 1, 6).map(f64::abs);
            let out = jumprelu(&z, &theta).unwrap();
            for r in 0..4 {
                for j in 0..6 {
                    let v = out.get(r, j);
                    prop_assert!(v == 0.0 || v > theta.get(0, j));
                }
            }
        }

        #[test]
        fn threshold_mean_order_insensitive(mut minima in proptest::collection::vec(0.001f64..10.0, 1..50), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = ThresholdEstimate::from_minima(&minima).theta_global();
            minima.shuffle(&mut RngState::new(seed));
            let b = ThresholdEstimate::from_minima(&minima).theta_global();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
