use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty image")]
    EmptyImage,

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("no images found under {0}")]
    NoImages(PathBuf),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("split fractions must sum to 1, got {0}")]
    InvalidFractions(f64),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("interpolation coefficient {0} outside [0, 1]")]
    InvalidDelta(f64),

    #[error("both features dropped")]
    BothFeaturesDropped,

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("empty input")]
    EmptyInput,

    #[error("missing branch input: {0}")]
    MissingBranch(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected}); re-save it with a matching release")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint was trained with backbone `{found}`, but `{expected}` is loaded")]
    BackboneMismatch { expected: String, found: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// An I/O error with a short description of what was being done.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
