use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("series `{id}` is too short: {len} timesteps, need at least {required}")]
    SeriesTooShort {
        id: String,
        len: usize,
        required: usize,
    },

    #[error("no series in the dataset is long enough for windows of length {required}")]
    NoUsableSeries { required: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("duplicate series id `{0}`")]
    DuplicateId(String),

    #[error("augmentation needs at least two windows in the batch, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward called on a graph whose gradients were already consumed")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        /// JSON dump of the offending batch.
        batch_dump: String,
    },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("missing score trace for series `{0}`")]
    MissingTrace(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
