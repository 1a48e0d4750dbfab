use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch ({detail})")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,

    #[error("loss does not depend on any tensor that requires grad")]
    NoGradPath,

    #[error("function under gradient check is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("malformed report at byte {offset}: {reason}")]
    MalformedReport { offset: usize, reason: String },

    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("score component `{name}` = {value} is outside [0, 1]")]
    ComponentOutOfRange { name: &'static str, value: f64 },

    #[error("unknown embedding backend `{0}`")]
    UnknownBackend(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            primitive,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
