use std::path::PathBuf;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("nifti: {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("image: {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image without matching mask: {0}")]
    OrphanImage(PathBuf),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint format version mismatch: file has v{found}, this build reads v{expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("weight mismatch at array `{name}`: {detail}")]
    WeightMismatch { name: String, detail: String },

    #[error("config {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    /// Stable snake_case identifier of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Nifti { .. } => "nifti",
            Error::Image { .. } => "image",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::OrphanImage(_) => "orphan_image",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Checkpoint { .. } => "checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::WeightMismatch { .. } => "weight_mismatch",
            Error::Config { .. } => "config",
            Error::Plot(_) => "plot",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
