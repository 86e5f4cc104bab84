use thiserror::Error;

/// Errors produced by the analysis engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("model parse error at {location}: {message}")]
    ModelParse { location: String, message: String },

    #[error("missing required field: {0}")]
    MissingField(&'static str),

    #[error("solver diverged (non-finite state) at t={t}, h={h}")]
    SolverDivergence { t: f64, h: f64 },

    #[error("step budget exhausted after {steps} steps (t={t})")]
    StepBudget { steps: usize, t: f64 },

    #[error("instance generation budget exhausted (seed {seed}, {samples} samples)")]
    GenerationBudget { seed: u64, samples: usize },

    #[error("dimension {dim} above oracle cap {cap}")]
    OracleDimCap { dim: usize, cap: usize },

    #[error("empty constraint set")]
    EmptyConstraintSet,

    #[error("graph was not built with linear step records; rebuild in a linear mode")]
    MissingLinearRecords,

    #[error("spec/model mismatch: {0}")]
    SpecMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
