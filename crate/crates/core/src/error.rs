use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} `{key}`")]
    DuplicateKey { kind: &'static str, key: String },

    #[error("empty text")]
    EmptyText,

    #[error("features of `{0}` cancel to the zero vector")]
    ZeroEmbedding(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("run file invariant violated for query `{qid}`: {message}")]
    RunInvariant { qid: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("turn index {index} out of range for conversation `{conv_id}` with {len} turns")]
    TurnOutOfRange {
        conv_id: String,
        index: usize,
        len: usize,
    },

    #[error("turn `{0}` has no human rewrite")]
    MissingRewrite(String),

    #[error("bad binary file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage `{stage}` failed for `{qid}`: {source}")]
    Stage {
        stage: &'static str,
        qid: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn stage(stage: &'static str, qid: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage,
            qid: qid.into(),
            source: Box::new(source),
        }
    }
}
