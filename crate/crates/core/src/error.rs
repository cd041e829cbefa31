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

    #[error("malformed weights container: {0}")]
    Container(String),

    #[error("missing tensor `{0}` in weights container")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds context length {context_len}")]
    ContextLength { len: usize, context_len: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("patch error: {0}")]
    Patch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dataset curation error: {0}")]
    Curation(String),

    #[error("incomplete activation cache: {0}")]
    IncompleteCache(String),

    #[error("patch sweep error: {0}")]
    Sweep(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
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
