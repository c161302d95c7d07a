// SPDX-License-Identifier: MIT OR Apache-2.0

//! # batchtopk-sae
//!
//! Sparse autoencoders trained from scratch on activation vectors, in four
//! flavours:
//!
//! - **ReLU** with an L1 penalty and unit-norm decoder rows,
//! - **TopK**, keeping the `k` largest pre-activations per sample,
//! - **BatchTopK**, keeping the `B * k` largest pre-activations across the
//!   whole batch and switching to a single global threshold at inference,
//! - **JumpReLU**, with learned per-latent thresholds and an L0 penalty
//!   trained through a straight-through estimator.
//!
//! Everything (matrices, gradients, Adam) is implemented directly in `f64`
//! with no BLAS or autodiff dependency. A planted sparse-dictionary
//! generator provides data with known ground truth, and a small binary
//! format (`SAEACT1`) lets activations dumped from a real model be streamed
//! in.
//!
//! ```
//! use batchtopk_sae::{data::PlantedDictConfig,
//!     trainer::{train, TrainConfig, VariantKind}, data::ActivationDataset};
//!
//! let planted = PlantedDictConfig { d: 8, m_true: 16, k_min: 1, k_max: 3, ..Default::default() };
//! let mut cfg = TrainConfig::with_k(VariantKind::Batchtopk, 8, 16, 2);
//! cfg.batch_size = 64;
//! cfg.token_budget = 64 * 20;
//! let data = ActivationDataset::planted(planted, cfg.batch_size).unwrap();
//! let out = train(&cfg, data).unwrap();
//! assert_eq!(out.log.steps.len(), 20);
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sae;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SaeError};
pub use tensor::Matrix;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
