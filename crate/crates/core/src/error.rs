use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },

    #[error("distribution is not normalized: total mass {total} (tolerance {tolerance})")]
    Normalization { total: f64, tolerance: f64 },

    #[error("negative entry {value} at index {index}")]
    Negative { index: usize, value: f64 },

    #[error("non-finite value encountered")]
    NonFinite,

    #[error("instance has {pixels} pixels, oracle limit is {limit}")]
    Scale { pixels: usize, limit: usize },

    #[error("infeasible transport instance: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image has zero total mass and cannot be normalized")]
    DegenerateImage,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("IDX format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("image count {images} does not match label count {labels}")]
    Pairing { images: usize, labels: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::Dimension {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
