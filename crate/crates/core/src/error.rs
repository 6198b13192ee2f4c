use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contour has no points")]
    EmptyContour,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("degenerate contour: all points coincide")]
    DegenerateContour,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no contour detected")]
    NoContour,
    #[error("no positive pixels across the dataset")]
    NoPositivePixels,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
