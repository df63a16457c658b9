use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("ln of non-positive value {value} at flat index {index}")]
    NonPositiveLog { index: usize, value: f64 },

    #[error("{what}: row {index} has zero norm")]
    ZeroNorm { what: &'static str, index: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),

    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),

    #[error("cluster {0} has no members")]
    EmptyCluster(usize),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("query {0} has no usable gallery entries")]
    EmptyGallery(usize),

    #[error("ranking contains no relevant entry")]
    NoRelevant,

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Ppm { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
