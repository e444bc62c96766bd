use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("point at camera-frame depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("sample count must be at least 2, got {0}")]
    InvalidSampleCount(usize),
    #[error("no occupied voxels to measure proximity against")]
    EmptyGrid,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("depths must be ascending")]
    NonAscendingDepths,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("corrupt or missing file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("format version mismatch in {path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("dataset not found at {0}")]
    DatasetMissing(PathBuf),
    #[error("checkpoint not found at {0}")]
    CheckpointMissing(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NotScalar(_) => "not_scalar",
            Error::NonPositiveDepth(_) => "non_positive_depth",
            Error::InvalidSampleCount(_) => "invalid_sample_count",
            Error::EmptyGrid => "empty_grid",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonAscendingDepths => "non_ascending_depths",
            Error::InvalidCamera(_) => "invalid_camera",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::ConfigInvalid(_) => "config_invalid",
            Error::CorruptFile { .. } => "corrupt_file",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::DatasetMissing(_) => "dataset_missing",
            Error::CheckpointMissing(_) => "checkpoint_missing",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub(crate) fn check_len(left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::LengthMismatch { left, right })
    }
}
