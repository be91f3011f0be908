use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("degenerate features: feature table has rank {rank} < d = {dim}")]
    DegenerateFeatures { rank: usize, dim: usize },

    #[error("realizability violated: residual {residual:e} exceeds {tolerance:e} (task {task}, stage {stage})")]
    NotRealizable {
        task: usize,
        stage: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("rank-deficient design; increase n or λ_reg")]
    RankDeficient,

    #[error("stage {stage}, encoder `{encoder}`: {source}")]
    Fit {
        stage: usize,
        encoder: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unbounded concentrability: behavior occupancy is zero at stage {stage}, state {state}, action {action} which is reachable with probability {reach:e}")]
    UnboundedConcentrability {
        stage: usize,
        state: usize,
        action: usize,
        reach: f64,
    },

    #[error("instance too large for enumeration: {policies} deterministic policies exceeds the limit {limit}")]
    InstanceTooLarge { policies: f64, limit: f64 },

    #[error("schema version mismatch: file has version {found}, this build reads version {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
