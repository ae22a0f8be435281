use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lesions {first} and {second} overlap")]
    Overlap { first: usize, second: usize },

    #[error("lesion {index} out of bounds: {reason}")]
    Bounds { index: usize, reason: String },

    #[error("format error in {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown attribute value {aspect}: {value:?}")]
    UnknownValue { aspect: String, value: String },

    #[error("text provider failed on {description:?}: {reason}")]
    Provider { description: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{lesions} lesions exceed {tokens} mask tokens")]
    Size { lesions: usize, tokens: usize },

    #[error("ground-truth mask for lesion {0} is empty")]
    EmptyMask(usize),

    #[error("schema hash mismatch: checkpoint {expected}, bank {found}")]
    HashMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { what: what.into(), reason: reason.into() }
    }
}
