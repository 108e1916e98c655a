use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
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

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("question `{0}` has no answers")]
    EmptyAnswers(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("evidence chain is empty")]
    EmptyChain,

    #[error("no candidate chains given")]
    NoChains,

    #[error("corpus has {passages} passages, fewer than the {hops} hops requested")]
    CorpusTooSmall { passages: usize, hops: usize },

    #[error("dense index is stale: built for encoder version {index}, params are at {params}")]
    StaleIndex { index: u64, params: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("positive chain has no answer occurrence")]
    NoAnswerOccurrence,

    #[error("chain has no evidence tokens")]
    NoEvidenceTokens,

    #[error("no training examples: {0}")]
    NoExamples(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown passage id `{0}`")]
    UnknownPassage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
