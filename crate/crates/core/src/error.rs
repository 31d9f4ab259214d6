use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("validation failed for {record}: {reason}")]
    Validation { record: String, reason: String },

    #[error("degenerate mean embedding for class {class_id}: shots cancel out")]
    DegenerateMean { class_id: usize },

    #[error("cannot place {requested} objects on a {width}x{height} canvas")]
    CanvasTooSmall { requested: usize, width: u32, height: u32 },

    #[error("training diverged at iteration {iteration} (batch seed {batch_seed}): {detail}")]
    Diverged { iteration: usize, batch_seed: u64, detail: String },

    #[error("stage order violation: {0}")]
    Stage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("image codec: {0}")]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn validation(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { record: record.into(), reason: reason.into() }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidBox { .. }
                | Error::InvalidArgument(_)
                | Error::DimensionMismatch(_)
                | Error::Validation { .. }
                | Error::Stage(_)
                | Error::Json { .. }
                | Error::CanvasTooSmall { .. }
        )
    }
}
