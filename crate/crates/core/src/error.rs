use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("source unreachable: {0}")]
    SourceUnreachable(String),

    #[error("duplicate file id `{0}`")]
    DuplicateFileId(String),

    #[error("duplicate chunk id `{0}`")]
    DuplicateChunkId(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("candidate list has no positive label")]
    NoPositive,

    #[error("retries exhausted after {attempts} attempts")]
    ExhaustedRetries { attempts: u32 },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("scorer failure: {0}")]
    Scorer(String),

    #[error("nlist {nlist} exceeds number of chunks {count}")]
    TooManyLists { nlist: usize, count: usize },

    #[error("unsupported index file version {0}")]
    VersionMismatch(u32),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("malformed manifest at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("insufficient negatives for question `{question}`: wanted {wanted}, found {found}")]
    InsufficientNegatives {
        question: String,
        wanted: usize,
        found: usize,
    },

    #[error("ungrounded QA pair for question `{question}`: {reason}")]
    Ungrounded { question: String, reason: String },

    #[error("train/eval leakage: file `{0}` appears in both samples")]
    Leakage(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index is empty")]
    EmptyIndex,

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
