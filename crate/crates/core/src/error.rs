use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("invalid operator sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),

    #[error("no bandwidth entry for group size {0}")]
    MissingBandwidth(u32),

    #[error("degree {0} is not a candidate degree")]
    UnknownDegree(u32),

    #[error("measured costs: {0}")]
    MeasuredCosts(String),

    #[error("measured costs: unknown block index {0}")]
    UnknownBlock(usize),

    #[error("length mismatch: expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid plan: {}", .0.join("; "))]
    InvalidPlan(Vec<String>),

    #[error("no strategy fits the memory budget of {budget} bytes (minimum usage {min_usage} bytes)")]
    Infeasible { budget: f64, min_usage: f64 },

    #[error("brute force would evaluate {count} strategies, above the cap of {cap}")]
    CapExceeded { count: u128, cap: u64 },

    #[error("rank correlation is undefined: {0}")]
    Degenerate(String),

    #[error("makespan is zero")]
    ZeroMakespan,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
