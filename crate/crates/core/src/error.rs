use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("no spectral peak in band {lo_hz:.3}-{hi_hz:.3} Hz")]
    NoPeak { lo_hz: f64, hi_hz: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("no reflector above detection threshold (peak/median {ratio:.2} < {threshold:.2})")]
    RoiDetection { ratio: f64, threshold: f64 },

    #[error("split error: {0}")]
    Split(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (sessions: {sessions})")]
    Divergence {
        epoch: usize,
        batch: usize,
        sessions: String,
    },

    #[error("incompatible checkpoint: {0}")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
