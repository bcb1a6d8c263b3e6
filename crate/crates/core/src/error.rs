use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid spans: {0}")]
    InvalidSpans(String),

    #[error("ill-formed BILOU at position {position}")]
    IllFormedBilou { position: usize },

    #[error("empty catalog")]
    EmptyCatalog,

    #[error("{message} line {line}")]
    Format { message: String, line: usize },

    #[error("item count out of range: {0}")]
    ItemCount(usize),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("no legal path")]
    NoLegalPath,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch} batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(message: impl Into<String>, line: usize) -> Self {
        Error::Format {
            message: message.into(),
            line,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
