use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt blob header for utterance `{id}`: {reason}")]
    CorruptHeader { id: String, reason: String },

    #[error("dimension mismatch in blob for utterance `{id}`: header declares {declared} bytes of payload, found {found}")]
    DimensionMismatch { id: String, declared: usize, found: usize },

    #[error("missing blob for utterance `{id}`: {path}")]
    MissingBlob { id: String, path: PathBuf },

    #[error("manifest parse error on line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("CTC target of length {target_len} (with {repeats} adjacent repeats) cannot be aligned to {frames} frames{}", id.as_ref().map(|i| format!(" for utterance `{i}`")).unwrap_or_default())]
    CtcInfeasible {
        id: Option<String>,
        frames: usize,
        target_len: usize,
        repeats: usize,
    },

    #[error("batch-size error: {0}")]
    BatchSize(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("augmentation error: {0}")]
    Augmentation(String),

    #[error("pair ingestion error: missing augmented views for ids [{}]", .0.join(", "))]
    MissingPairs(Vec<String>),

    #[error("oracle size error: {0}")]
    OracleSize(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gradient check aborted: {0}")]
    GradCheck(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
