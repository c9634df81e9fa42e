use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("non-finite sample at index {0}")]
    NonFinite(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wrong representation: expected {expected}, got {actual}")]
    WrongKind {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty window: {0}")]
    EmptyWindow(String),

    #[error("undefined recall: reference list is empty")]
    UndefinedRecall,

    #[error("undefined SNR: clip is silent")]
    UndefinedSnr,

    #[error("training data: {0}")]
    Training(String),

    #[error("impossible placement: {0}")]
    Placement(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("audio: {0}")]
    Audio(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::DimensionMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Audio(other.to_string()),
        }
    }
}

impl From<zip::result::ZipError> for Error {
    fn from(e: zip::result::ZipError) -> Self {
        Error::UnsupportedFormat(e.to_string())
    }
}
