use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("backward requires a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("iteration {iter} outside schedule range [0, {total})")]
    IterOutOfRange { iter: usize, total: usize },

    #[error("invalid dataset spec: {0}")]
    InvalidDataset(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("cutmix rectangle {rect:?} does not fit a {height}x{width} frame")]
    RectOutOfFrame {
        rect: (usize, usize, usize, usize),
        height: usize,
        width: usize,
    },

    #[error("batch index {index} out of range for batch of {len}")]
    BatchIndex { index: usize, len: usize },

    #[error("class {0} has no pixels in the labeled set")]
    MissingClass(usize),

    #[error("every class has zero union; mIoU undefined")]
    EmptyConfusion,

    #[error("discrimination needs at least two classes with two samples each")]
    TooFewClasses,

    #[error("intra-class trace is zero; discrimination ratio undefined")]
    UndefinedRatio,

    #[error("empty labeled set")]
    EmptyLabeledSet,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

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
