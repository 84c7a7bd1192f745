use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("support too large for the exact solver ({rows}x{cols}, limit {limit}); use sinkhorn")]
    SupportTooLarge {
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error("scaling overflow in sinkhorn at iteration {iteration}; retry with log-domain iterations")]
    ScalingOverflow { iteration: usize },

    #[error("sinkhorn result did not converge (residual {residual:e})")]
    NotConverged { residual: f64 },

    #[error("coupling has a negative entry {value} at ({row}, {col})")]
    NegativeMass { row: usize, col: usize, value: f64 },

    #[error("action {0} is outside the policy's support")]
    InvalidAction(String),

    #[error("incompatible state for embedding: {0}")]
    IncompatibleState(String),

    #[error("optimal path is not unique: {count} tied paths of cost {cost}, e.g. {examples:?}")]
    TiedOptimalPaths {
        count: u128,
        cost: f64,
        examples: Vec<Vec<usize>>,
    },

    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged {
        iteration: usize,
        what: String,
        snapshot: Box<serde_json::Value>,
    },

    #[error("seed {seed} diverged at iteration {iteration} ({reason}); snapshot written to {}", snapshot.display())]
    Aborted {
        seed: u64,
        iteration: usize,
        reason: String,
        snapshot: std::path::PathBuf,
    },

    #[error("bad input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
