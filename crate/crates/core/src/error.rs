use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} at sample {sample} is out of range for {classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(
        "infeasible allocation: the smallest achievable size is {min_bytes} bytes, \
         capacity must be strictly greater (got {capacity})"
    )]
    Infeasible { min_bytes: u64, capacity: u64 },

    #[error("instance too large for exhaustive search ({0} combinations)")]
    TooLarge(u128),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bound undefined: mean of {0} is zero")]
    ZeroMean(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
