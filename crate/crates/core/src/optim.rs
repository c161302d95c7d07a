// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with bias correction, one state per parameter tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::tensor::Matrix;

pub const DEFAULT_LR: f64 = 3e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(SaeError::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m1: Matrix,
    pub m2: Matrix,
    pub step_count: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, cfg: AdamConfig) -> Self {
        Self {
            m1: Matrix::zeros(rows, cols),
            m2: Matrix::zeros(rows, cols),
            step_count: 0,
            cfg,
        }
    }

    pub fn for_param(param: &Matrix, cfg: AdamConfig) -> Self {
        Self::new(param.rows(), param.cols(), cfg)
    }

    /// One Adam update of `param` in place.
    ///
    /// The gradient is checked before any state changes, so a rejected
    /// step leaves both the state and the parameter untouched.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m1.shape() {
            return Err(SaeError::ShapeMismatch {
                op: "adam_step",
                left: param.shape(),
                right: grad.shape(),
            });
        }
        grad.ensure_finite("adam gradient")?;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (m1, m2) = (self.m1.data_mut(), self.m2.data_mut());
        for (((p, &g), a), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m1.iter_mut())
            .zip(m2.iter_mut())
        {
            *a = beta1 * *a + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *a / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
