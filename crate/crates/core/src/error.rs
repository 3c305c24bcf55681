use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at cell {index}")]
    NonFinite { index: usize },

    #[error("shape is empty: no occupied voxels")]
    EmptyShape,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("header declares {expected} payload bytes but {found} are present")]
    Truncated { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("timestep {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("embedding dimension must be even, got {0}")]
    OddDim(usize),

    #[error("non-finite activation in layer `{layer}`")]
    NonFiniteActivation { layer: String },

    #[error("non-finite loss; parameters restored")]
    NanLoss,

    #[error("zero-norm embedding at index {0}")]
    DegenerateEmbedding(usize),

    #[error("slerp endpoints are antipodal; interpolation plane undefined")]
    AmbiguousPath,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("evaluation set is empty")]
    EmptySet,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient items: {0}")]
    InsufficientItems(String),

    #[error("incomplete session for pairs: {}", .0.join(", "))]
    IncompleteSession(Vec<String>),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }
}
