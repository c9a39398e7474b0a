use thiserror::Error;

/// Errors produced by the ingest, graph, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: invalid field {field}: {reason}")]
    InvalidField {
        line: usize,
        field: String,
        reason: String,
    },

    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("unknown {kind} id: {id}")]
    UnknownId { kind: &'static str, id: String },

    #[error("feature row for video {video} has {got} values, expected {expected}")]
    DimMismatch {
        video: String,
        got: usize,
        expected: usize,
    },

    #[error("video {video} has interactions but no feature row")]
    MissingFeature { video: String },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("negative interactions never enter a graph")]
    NegativeClassInGraph,

    #[error("fixed feature mode requires a feature table")]
    MissingFeatureTable,

    #[error("non-finite gradient in {param}; training aborted")]
    NonFiniteGradient { param: &'static str },

    #[error("no user has a relevant test candidate")]
    NoEligibleUsers,

    #[error("paired t-test needs at least 2 paired runs, got {got}")]
    TooFewRuns { got: usize },

    #[error("checkpoint version {got} is unsupported (expected {expected})")]
    CheckpointVersion { got: u32, expected: u32 },

    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig { .. } | Error::TooFewRuns { .. } => 1,
            Error::NonFiniteGradient { .. } => 3,
            _ => 2,
        }
    }
}
