use std::path::PathBuf;

use thiserror::Error;

use crate::ndgraph::GraphError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("unknown token {ch:?} at position {position}")]
    UnknownToken { ch: char, position: usize },
    #[error("token index {index} outside vocabulary of size {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },
    #[error("invalid sequence length {len}: {reason}")]
    InvalidLength { len: usize, reason: &'static str },
    #[error("{0} requires a non-empty batch")]
    EmptyBatch(&'static str),
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("relaxation draws do not match the sample batch: {0}")]
    MismatchedRandomness(String),
    #[error("sequence space {vocab}^{len} is too large to enumerate; use a smaller instance")]
    NotEnumerable { vocab: usize, len: usize },
    #[error("{0}")]
    Estimator(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
