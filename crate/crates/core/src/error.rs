use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MmflError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MmflError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("non-finite loss at epoch {epoch} step {step}: {diagnostic}")]
    NonFinite {
        epoch: usize,
        step: usize,
        diagnostic: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl MmflError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<safetensors::SafeTensorError> for MmflError {
    fn from(err: safetensors::SafeTensorError) -> Self {
        Self::Checkpoint(err.to_string())
    }
}
