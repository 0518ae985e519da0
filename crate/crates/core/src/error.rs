use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid box {rect:?} for a {width}x{height} image")]
    InvalidBox {
        rect: [i64; 4],
        width: usize,
        height: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("detector produced no candidate predictions")]
    NoCandidates,

    #[error("{path}:{line}: {msg}")]
    Annotation {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing image file {0}")]
    MissingImage(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image codec error: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
