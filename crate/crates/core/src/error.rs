use thiserror::Error;

use crate::attention::AttentionError;
use crate::corpus::CorpusError;
use crate::llmclient::LlmError;
use crate::positional::BinError;
use crate::report::ReportError;
use crate::scorers::ScoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error. Each variant wraps the error of one module so callers
/// can still match on the underlying cause.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True when the failure originates in an external service (LLM or
    /// fact-check endpoint) rather than in local data.
    pub fn is_upstream(&self) -> bool {
        match self {
            Error::Llm(e) => e.is_upstream(),
            Error::Score(e) => e.is_upstream(),
            _ => false,
        }
    }
}
