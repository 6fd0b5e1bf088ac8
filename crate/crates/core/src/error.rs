use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the `dc3` library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no annotations")]
    NoAnnotations,

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid soft label: {0}")]
    InvalidSoftLabel(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("manifest has {} validation error(s): {}", .0.len(), .0.join("; "))]
    InvalidManifest(Vec<String>),

    #[error("split '{0}' would be empty")]
    EmptySplit(&'static str),

    #[error("unknown backbone '{0}'")]
    UnknownBackbone(String),

    #[error("unknown SSL algorithm '{0}'")]
    UnknownAlgorithm(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("no labeled items available for training")]
    NoLabeledData,

    #[error("mismatched image sets: {0}")]
    MismatchedImageSets(String),

    #[error("missing mode '{0}'")]
    MissingMode(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
