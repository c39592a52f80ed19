use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SclError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("demonstration `{demo}` is degenerate: {reason}")]
    DegenerateDemo { demo: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("ingestion error at {}: {message}", path.display())]
    Ingestion { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("architecture {arch} has no {capability}")]
    Capability { arch: String, capability: String },

    #[error("unknown architecture `{0}`; valid ids: NASNET, FCN, T_FCN, ATTN_RNN, TRANSFORMER, DANN, ADDA, T_FCN_ADDA")]
    UnknownArch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} ({detail})")]
    NumericalFailure {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SclError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingestion(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by non-finite numbers during training.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NumericalFailure { .. })
    }
}

pub type Result<T, E = SclError> = std::result::Result<T, E>;
