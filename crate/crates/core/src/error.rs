use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("shape violation: {0}")]
    ShapeViolation(String),

    #[error("could not place {requested} people without exceeding the overlap bound (placed {placed})")]
    PlacementFailure { requested: usize, placed: usize },

    #[error("crop {crop} is too large for a {height}x{width} sample")]
    CropTooLarge { crop: usize, height: usize, width: usize },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("missing annotation for sample `{id}`")]
    MissingAnnotation { id: String },

    #[error("dataset missing: {0}")]
    DatasetMissing(PathBuf),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("non-finite {term} loss at stage {stage}")]
    NonFiniteLoss { stage: String, term: String },

    #[error("posteriors need at least one annotated point")]
    NoPoints,

    #[error("GAME level must be non-negative, got {0}")]
    NegativeLevel(i64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether this error came from bad input data rather than configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedFile { .. }
                | Error::MissingAnnotation { .. }
                | Error::DatasetMissing(_)
                | Error::EmptyDataset
                | Error::Io { .. }
                | Error::PlacementFailure { .. }
        )
    }
}
