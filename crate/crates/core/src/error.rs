use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("layer `{0}` is not a valid concept layer for this model")]
    InvalidConceptLayer(String),

    #[error("no relevance rule for layer `{name}` ({kind})")]
    UnsupportedLayer { name: String, kind: &'static str },

    #[error("channel {channel} out of range for a layer with {channels} channels")]
    ChannelOutOfRange { channel: usize, channels: usize },

    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no reference sample predicted differently from class {0}")]
    NoTarget(usize),

    #[error("no completed results under {}", .0.display())]
    NoResults(PathBuf),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("configuration: {0}")]
    Config(String),

    #[error("missing file or directory: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Data,
    Runtime,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_)
            | Error::ShapeMismatch { .. }
            | Error::TimestepOutOfRange { .. }
            | Error::InvalidSchedule(_)
            | Error::UnknownLayer(_)
            | Error::InvalidConceptLayer(_)
            | Error::ChannelOutOfRange { .. }
            | Error::ClassOutOfRange { .. }
            | Error::Config(_)
            | Error::MissingPath(_) => ErrorCategory::Validation,
            Error::Format(_)
            | Error::FormatVersion { .. }
            | Error::Integrity(_)
            | Error::Image(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::UnsupportedLayer { .. }
            | Error::NonFinite(_)
            | Error::EmptyDataset
            | Error::NoTarget(_)
            | Error::NoResults(_) => ErrorCategory::Runtime,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}

pub(crate) fn check_shape(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}
