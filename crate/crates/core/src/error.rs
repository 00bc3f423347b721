use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no traces in {0}")]
    NoTraces(PathBuf),
    #[error("trace kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("invalid trace {id}: {reason}")]
    InvalidTrace { id: String, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("episode is done")]
    EpisodeDone,
    #[error("corrupted snapshot: {0}")]
    CorruptedSnapshot(String),
    #[error("offset {offset} s outside valid range [0, {limit}) s")]
    OffsetOutOfRange { offset: f64, limit: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("component mismatch: {0}")]
    ComponentMismatch(String),
    #[error("policy does not expose an embedding")]
    EmbeddingUnavailable,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
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
