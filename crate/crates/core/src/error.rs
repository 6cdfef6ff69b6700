use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the denoising toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A pixel or sample was NaN or infinite.
    #[error("data integrity: non-finite value at index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed binary file; `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("weights do not match network: {0}")]
    WeightMismatch(String),

    #[error("unmatched slice files: {}", .0.join(", "))]
    Unmatched(Vec<String>),

    #[error("geometry mismatch in pair {id}: {detail}")]
    Geometry { id: String, detail: String },

    #[error("pretrained feature extractor weights unavailable at {path}: {reason}")]
    MissingExtractor { path: PathBuf, reason: String },

    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
