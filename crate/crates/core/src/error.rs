use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (0..{len})")]
    Index { index: usize, len: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("empty sample set: {0}")]
    EmptySet(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown model variant `{0}` (expected vanilla, om, oma, omba or ensemble)")]
    UnknownVariant(String),

    #[error("unknown rater operation `{0}` (expected erode, dilate or identity)")]
    UnknownOp(String),

    #[error("case `{case}` has no mask for rater {rater}")]
    MissingRater { case: String, rater: usize },

    #[error("model has {model} decoder branches but dataset has {dataset} raters")]
    RaterMismatch { model: usize, dataset: usize },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
