use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("duplicate doc_key at line {line}: {key}")]
    DuplicateKey { key: String, line: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unknown doc_key: {0}")]
    UnknownDocKey(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid docid: {0}")]
    InvalidDocid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("not enough vectors for k-means: got {got}, need at least {need}")]
    TooFewVectors { got: usize, need: usize },

    #[error("no free code variant left for colliding raw code {0:?}")]
    CodeSpaceExhausted(Vec<u32>),

    #[error("generation failed for {kind} on {doc_key}: {message}")]
    Generation {
        kind: String,
        doc_key: String,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("table too large for exhaustive ranking: {size} > {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Malformed { .. } => "malformed",
            Error::DuplicateKey { .. } => "duplicate_key",
            Error::EmptyCorpus => "empty_corpus",
            Error::UnknownDocKey(_) => "unknown_doc_key",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::InvalidDocid(_) => "invalid_docid",
            Error::NonFinite(_) => "non_finite",
            Error::TooFewVectors { .. } => "too_few_vectors",
            Error::CodeSpaceExhausted(_) => "code_space_exhausted",
            Error::Generation { .. } => "generation",
            Error::EmptyInput(_) => "empty_input",
            Error::TooLarge { .. } => "too_large",
            Error::Format(_) => "format",
            Error::Json(_) => "json",
        }
    }
}
