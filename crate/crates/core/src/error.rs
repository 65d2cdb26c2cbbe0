use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("slerp endpoints are degenerate (zero norm, parallel or antipodal)")]
    DegenerateSlerp,

    #[error("edit touches {k} pixels, limit is {limit}")]
    EditLimit { k: usize, limit: usize },

    #[error("singular value decomposition failed")]
    Svd,

    #[error("no usable images in {0}")]
    EmptyDataset(PathBuf),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: u64, what: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}
