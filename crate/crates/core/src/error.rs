// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::io;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SaeError>;

/// Errors emitted by the toolkit.
#[derive(Debug, Error)]
pub enum SaeError {
    /// Two operands had incompatible shapes.
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A constructor received a buffer whose length disagrees with the shape.
    #[error("data length {got} does not match shape {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        got: usize,
    },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A scalar or count argument is outside its valid range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A decoder row has zero norm and cannot be normalized.
    #[error("degenerate latent {row}: decoder row has zero norm")]
    DegenerateLatent { row: usize },

    /// The configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a non-finite loss term.
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: &'static str },

    /// A BatchTopK model was run in inference mode without a global threshold.
    #[error("BatchTopK inference requires a global threshold")]
    MissingThreshold,

    /// Threshold estimation saw no strictly positive activation.
    #[error("no positive activations: cannot estimate a threshold")]
    NoPositiveActivations,

    /// The data source produced nothing to evaluate.
    #[error("empty data: {0}")]
    EmptyData(String),

    /// A binary file did not follow the expected layout.
    #[error("bad file format: {0}")]
    Format(String),

    /// I/O failure, with the byte offset where it happened when known.
    #[error("I/O error at offset {offset:?}: {source}")]
    Io {
        offset: Option<u64>,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<io::Error> for SaeError {
    fn from(source: io::Error) -> Self {
        SaeError::Io {
            offset: None,
            source,
        }
    }
}

impl SaeError {
    pub(crate) fn io_at(offset: u64, source: io::Error) -> Self {
        SaeError::Io {
            offset: Some(offset),
            source,
        }
    }
}
