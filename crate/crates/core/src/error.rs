use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("cannot encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("image has a zero dimension ({width}x{height})")]
    EmptyImage { width: usize, height: usize },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("image {width}x{height} is smaller than the required {required}x{required}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        required: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("samples have zero variance")]
    DegenerateSamples,

    #[error("objective is not finite at the starting point")]
    NonFiniteStart,

    #[error("mask leaves no known pixels to inpaint from")]
    NothingKnown,

    #[error("could not draw a fan covering {lo}-{hi} of the image in {tries} attempts")]
    FanAreaOutOfBounds { lo: f64, hi: f64, tries: usize },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
