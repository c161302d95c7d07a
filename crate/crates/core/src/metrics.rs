// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation metrics: NMSE, per-sample L0 statistics, dead latents and
//! planted-dictionary recovery (mean max cosine similarity).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::tensor::Matrix;

/// Denominator convention for NMSE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmseNormalization {
    /// `sum ||x - x_hat||^2 / sum ||x - mean||^2`; predicting the mean scores 1.
    #[default]
    MeanCentered,
    /// `sum ||x - x_hat||^2 / sum ||x||^2`.
    Raw,
}

/// NMSE of one matrix pair against a given dataset mean (`1 x d`).
pub fn nmse(x: &Matrix, recon: &Matrix, dataset_mean: &Matrix) -> Result<f64> {
    let mut acc = NmseAccumulator::new(x.cols());
    acc.add(x, recon)?;
    if dataset_mean.shape() != (1, x.cols()) {
        return Err(SaeError::ShapeMismatch {
            op: "nmse",
            left: x.shape(),
            right: dataset_mean.shape(),
        });
    }
    let mut denom = 0.0;
    for row in x.row_iter() {
        for (v, mu) in row.iter().zip(dataset_mean.data()) {
            denom += (v - mu) * (v - mu);
        }
    }
    ratio(acc.sse, denom)
}

fn ratio(num: f64, denom: f64) -> Result<f64> {
    if !(denom > 0.0) {
        return Err(SaeError::InvalidArgument(
            "NMSE denominator is zero (constant dataset)".into(),
        ));
    }
    Ok(num / denom)
}

/// Streaming NMSE over many batches.
///
/// The mean-centered denominator is accumulated per dimension as
/// `sum x^2 - (sum x)^2 / N`.
#[derive(Clone, Debug)]
pub struct NmseAccumulator {
    sse: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n: u64,
}

impl NmseAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            sse: 0.0,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
            n: 0,
        }
    }

    pub fn add(&mut self, x: &Matrix, recon: &Matrix) -> Result<()> {
        if x.shape() != recon.shape() || x.cols() != self.sum.len() {
            return Err(SaeError::ShapeMismatch {
                op: "nmse",
                left: x.shape(),
                right: recon.shape(),
            });
        }
        for (xr, rr) in x.row_iter().zip(recon.row_iter()) {
            for (j, (&a, &b)) in xr.iter().zip(rr).enumerate() {
                self.sse += (a - b) * (a - b);
                self.sum[j] += a;
                self.sum_sq[j] += a * a;
            }
        }
        self.n += x.rows() as u64;
        Ok(())
    }

    pub fn samples(&self) -> u64 {
        self.n
    }

    pub fn finish(&self, norm: NmseNormalization) -> Result<f64> {
        let denom = match norm {
            NmseNormalization::Raw => self.sum_sq.iter().sum(),
            NmseNormalization::MeanCentered => {
                let n = self.n.max(1) as f64;
                self.sum
                    .iter()
                    .zip(&self.sum_sq)
                    .map(|(s, sq)| (sq - s * s / n).max(0.0))
                    .sum()
            }
        };
        ratio(self.sse, denom)
    }
}

/// Per-sample count of strictly positive latents.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct L0Stats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub hist: BTreeMap<usize, u64>,
}

pub fn l0_stats(latents: &Matrix) -> L0Stats {
    let mut acc = L0Accumulator::default();
    acc.add(latents);
    acc.finish()
}

#[derive(Clone, Debug, Default)]
pub struct L0Accumulator {
    hist: BTreeMap<usize, u64>,
}

impl L0Accumulator {
    pub fn add(&mut self, latents: &Matrix) {
        for row in latents.row_iter() {
            let count = row.iter().filter(|&&v| v > 0.0).count();
            *self.hist.entry(count).or_default() += 1;
        }
    }

    pub fn finish(&self) -> L0Stats {
        let n: u64 = self.hist.values().sum();
        if n == 0 {
            return L0Stats::default();
        }
        let nf = n as f64;
        let mean = self
            .hist
            .iter()
            .map(|(&k, &c)| k as f64 * c as f64)
            .sum::<f64>()
            / nf;
        let variance = self
            .hist
            .iter()
            .map(|(&k, &c)| (k as f64 - mean).powi(2) * c as f64)
            .sum::<f64>()
            / nf;
        L0Stats {
            mean,
            variance,
            hist: self.hist.clone(),
        }
    }
}

/// Mean over ground-truth rows of the best cosine similarity to any
/// learned decoder row. Zero-norm rows on either side are skipped.
pub fn mmcs(learned_dec: &Matrix, true_dict: &Matrix) -> Result<f64> {
    if learned_dec.cols() != true_dict.cols() {
        return Err(SaeError::ShapeMismatch {
            op: "mmcs",
            left: learned_dec.shape(),
            right: true_dict.shape(),
        });
    }
    let unit = |m: &Matrix, what: &str| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(m.rows());
        for (r, row) in m.row_iter().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                warn!("mmcs: skipping zero-norm {what} row {r}");
                continue;
            }
            out.push(row.iter().map(|v| v / n).collect());
        }
        out
    };
    let learned = unit(learned_dec, "learned");
    let truth = unit(true_dict, "ground-truth");
    if learned.is_empty() || truth.is_empty() {
        return Err(SaeError::EmptyData(
            "mmcs needs non-zero rows on both sides".into(),
        ));
    }
    let total: f64 = truth
        .iter()
        .map(|t| {
            learned
                .iter()
                .map(|l| l.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok((total / truth.len() as f64).clamp(-1.0, 1.0).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: u64,
    pub nmse: f64,
    pub nmse_normalization: NmseNormalization,
    pub l0_mean: f64,
    pub l0_variance: f64,
    pub l0_min: usize,
    pub l0_max: usize,
    pub l0_hist: BTreeMap<usize, u64>,
    /// Fraction of latents that never fired on the evaluated samples.
    pub dead_fraction: f64,
    pub theta_global: Option<f64>,
    pub mmcs: Option<f64>,
    /// `"train"` or `"inference"`.
    pub mode: String,
}

impl MetricsReport {
    /// Histogram as `l0,count` CSV lines.
    pub fn hist_csv(&self) -> String {
        let mut s = String::from("l0,count\n");
        for (k, c) in &self.l0_hist {
            let _ = writeln!(s, "{k},{c}");
        }
        s
    }
}
