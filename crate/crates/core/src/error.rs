use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed something malformed (dimension mismatch, bad range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Training produced a non-finite quantity and was aborted.
    #[error("training fault at step {step}: {detail}")]
    TrainingFault { step: u64, detail: String },

    /// Weight calibration hit a degenerate estimate.
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error on {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
