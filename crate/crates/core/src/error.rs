use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: loss is detached from the graph (no input requires grad)")]
    Detached,

    #[error("attention: query row {row} has no allowed keys")]
    EmptyAttentionRow { row: usize },

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("sampler: non-finite state at step {step}")]
    SamplerDiverged { step: usize },

    #[error("rollout: non-finite frame {frame} at step {step}")]
    RolloutDiverged { frame: usize, step: usize },

    #[error("optimizer: non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("config: {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("config snapshot mismatch on keys: {0:?}")]
    ConfigMismatch(Vec<String>),

    #[error("container: {0}")]
    Format(String),

    #[error("container truncated: expected payload of {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from configuration rather than computation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::ConfigMismatch(_))
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
