use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition (shape, range, dimension).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {record}: {message}")]
    Parse { record: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),

    /// An external or pluggable backend failed.
    #[error("backend `{backend}` failed{}: {message}", if *.retryable { " (retryable)" } else { "" })]
    Backend {
        backend: String,
        retryable: bool,
        message: String,
    },

    #[error("caption `{0}` is not in the model vocabulary")]
    UnknownCaption(String),

    #[error("no tuple survived the dataset pipeline ({0})")]
    EmptyDataset(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("judge response could not be parsed after {attempts} attempts; last response: {last}")]
    UnparseableJudgment { attempts: usize, last: String },

    #[error("score undefined: {0}")]
    UndefinedScore(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { retryable: true, .. })
    }
}
