use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate co-occurrence statistics at ({y}, {x}): normalizer {z:e} below floor")]
    DegenerateStatistics { y: usize, x: usize, z: f64 },

    #[error("cannot fit {k} clusters: image has only {distinct} distinct colors")]
    DegenerateClusters { k: usize, distinct: usize },

    #[error("edit produced an all-zero matrix")]
    ZeroMatrix,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("checksum mismatch in {0}")]
    Corrupt(PathBuf),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
