// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("svd did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    SvdNonConvergence { sweeps: usize, residual: f64 },
    #[error("invalid expression: {0}")]
    Expr(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    NonFinite { step: usize, loss: f64 },
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
