use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no admissible entry")]
    DegenerateRow { row: usize },

    #[error("cosine similarity is undefined for a zero-norm vector")]
    UndefinedSimilarity,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("feature cache has no entry for t={t}, layer={layer}")]
    CacheMiss { t: u32, layer: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("reproducibility error: {0}")]
    Reproducibility(String),

    #[error("set consistency needs at least two shots, got {0}")]
    InsufficientShots(usize),

    #[error("prompt set `{set}`: {field}: {message}")]
    PromptParse {
        set: String,
        field: String,
        message: String,
    },

    #[error("step t={t} layer={layer}: {source}")]
    Step {
        t: u32,
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed tensor file: {0}")]
    TensorFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Attaches the denoising position at which a hook or layer failed.
    pub(crate) fn at_step(self, t: u32, layer: usize) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                t,
                layer,
                source: Box::new(e),
            },
        }
    }
}
