use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("label {label} at batch index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor belongs to a different graph")]
    ForeignGraph,

    #[error("non-finite value encountered in `{0}`")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("model is missing parameter group `{0}`")]
    MissingGroup(&'static str),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("trainable parameter `{0}` received no gradient")]
    MissingGradient(String),

    #[error("frame count mismatch: {0}")]
    FrameMismatch(String),

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("checkpoint: stream truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint: record `{name}` declares {declared} values but {found} are present")]
    LengthMismatch {
        name: String,
        declared: usize,
        found: usize,
    },

    #[error("checkpoint: record `{0}` does not belong to a known parameter group")]
    UnknownGroup(String),

    #[error("checkpoint: malformed metadata: {0}")]
    BadMeta(String),

    #[error("surgery: source and target architectures differ in {0:?}")]
    Surgery(Vec<String>),

    #[error("frozen parameter `{0}` changed during training")]
    FreezeViolation(String),

    #[error("missing initialization source: {0}")]
    MissingSource(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
