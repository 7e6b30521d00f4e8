use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tag `{0}` is not categorical")]
    NotCategorical(&'static str),
    #[error("tag `{0}` is categorical, expected a numeric tag")]
    NotNumeric(&'static str),
    #[error("tag `{0}` is absent")]
    TagAbsent(&'static str),
    #[error("no record has tag `{0}`")]
    NoValues(&'static str),
    #[error("no vocabulary for tag `{0}`")]
    NoVocabulary(&'static str),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {len} classes")]
    ClassIndex { index: usize, len: usize },

    #[error("covariance of component {0} is not positive definite")]
    Singular(usize),
    #[error("training diverged at iteration {iteration}: {message}")]
    NonFinite { iteration: u64, message: String },

    #[error("fit failed: {0}")]
    Convergence(String),

    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
