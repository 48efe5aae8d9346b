use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
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

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("conversation {record}: unresolvable entity reference {reference:?}")]
    UnresolvedEntity { record: String, reference: String },

    #[error("index format: {0}")]
    IndexFormat(String),

    #[error("index version mismatch: file has version {found}, this build reads version {expected}")]
    IndexVersion { found: u32, expected: u32 },

    #[error("index checksum mismatch")]
    IndexChecksum,

    #[error("empty seed set: fall back to popularity retrieval")]
    EmptySeeds,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "prompt budget of {budget} tokens cannot hold instructions, history and one candidate ({required} needed)"
    )]
    PromptBudget { budget: usize, required: usize },

    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
