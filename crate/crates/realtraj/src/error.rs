//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed line: {msg}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty sequence: {path}")]
    EmptySequence { path: PathBuf },

    #[error("scenario infeasible for seed {seed}: {msg}")]
    ScenarioInfeasible { seed: u64, msg: String },

    #[error("corrupt state: {0}")]
    CorruptState(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("forward requires at least one real token")]
    NoTokens,

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("no weak supervision available: all future frames empty")]
    NoWeakSupervision,

    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),

    #[error("checkpoint required")]
    CheckpointRequired,

    #[error("bad checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },

    #[error("bad config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
