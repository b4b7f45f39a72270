use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not line up with what an operation needs.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A layer, block or pipeline configuration that cannot produce a valid result.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient statistics: batch norm needs at least 2 values per channel in training mode, got {0}")]
    InsufficientStatistics(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("backward called before a training-mode forward")]
    NoForwardCache,

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid frame file {path}: {reason}")]
    Frame { path: PathBuf, reason: String },

    #[error("checkpoint has bad magic bytes")]
    CheckpointMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    CheckpointTruncated,

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("checkpoint payload is malformed: {0}")]
    CheckpointPayload(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    /// True for errors raised while reading or writing data and checkpoints.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Json(_)
                | Error::Manifest(_)
                | Error::Frame { .. }
                | Error::CheckpointMagic
                | Error::CheckpointVersion { .. }
                | Error::CheckpointTruncated
                | Error::CheckpointChecksum { .. }
                | Error::CheckpointPayload(_)
                | Error::EmptySplit(_)
        )
    }
}
