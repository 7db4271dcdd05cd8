// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    /// A required weight is absent or has the wrong shape.
    #[error("load error for tensor `{name}`: {reason}")]
    Load { name: String, reason: String },
    #[error("patch error: {0}")]
    Patch(String),
    /// `|score_perturbed - score_baseline|` fell below the impact epsilon.
    #[error("degenerate triple: score difference {diff:e} is below epsilon {epsilon:e}")]
    DegenerateTriple { diff: f64, epsilon: f64 },
    #[error("perturbation dropped: {0}")]
    Dropped(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = core::result::Result<T, Error>;
