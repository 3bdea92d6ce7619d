use std::io;

use thiserror::Error;

/// Errors produced by every module of the crate.
///
/// Variants are grouped by failure class so front ends can map them onto
/// exit codes without inspecting messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed file contents (bad magic, truncated payload, bad header).
    #[error("format error: {0}")]
    Format(String),

    /// A taxonomy group map is not a partition of the atom set.
    #[error("partition violation in dataset `{dataset}` at atom {atom}: {reason}")]
    Partition {
        dataset: String,
        atom: usize,
        reason: String,
    },

    /// Inputs that violate a documented precondition (ranges, shapes, ids).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Numerical breakdown: divergence, singular covariance.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}
