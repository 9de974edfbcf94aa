// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error types shared by every module.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors whose shapes must agree do not.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An argument is outside its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Model input (token ids, sequence length) is unusable.
    #[error("invalid input: {0}")]
    Input(String),

    /// Loss became NaN or infinite during training.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Two artifacts that must describe the same model do not.
    #[error("consistency failure: {0}")]
    Consistency(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}

/// Failures specific to reading a checkpoint file.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"MOESCP01\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found:?} (this build reads \"01\")")]
    VersionMismatch { found: String },

    #[error("checkpoint truncated: {context}")]
    Truncated { context: String },

    #[error("checkpoint header is not valid JSON: {0}")]
    Header(String),

    #[error("checkpoint inconsistent at tensor {tensor:?}: {reason}")]
    Inconsistent { tensor: String, reason: String },
}
