use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("unknown parameter slot `{0}`")]
    UnknownSlot(String),

    #[error("parameter slot `{0}` already exists")]
    DuplicateSlot(String),

    #[error(
        "tape was recorded against parameter version {recorded} but the store is at {current}"
    )]
    StaleTape { recorded: u64, current: u64 },

    #[error("value {value} is outside the support of {dist}")]
    OutOfSupport { dist: &'static str, value: String },

    #[error("empty sample set")]
    EmptySamples,

    #[error("degenerate weights: every log-weight is -inf")]
    DegenerateWeights,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint mismatch:\n{0}")]
    Checkpoint(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
