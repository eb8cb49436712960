use thiserror::Error;

/// Errors raised by model construction, simulation and the run harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid branching law: {0}")]
    InvalidLaw(String),

    #[error("population explosion: tree exceeded {cap} particles")]
    PopulationExplosion { cap: usize },

    #[error("series did not converge within {cap} terms")]
    SeriesDivergence { cap: usize },

    #[error("degenerate diffusion at t = {t}: {reason}")]
    DegenerateDiffusion { t: f64, reason: String },

    #[error("drift-correction mark encountered outside the frozen-coefficient scheme")]
    UnexpectedDriftMark,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite sample value {value} (stream key {key:#018x})")]
    NonFiniteSample { value: f64, key: u64 },

    #[error("degenerate ensemble at generation {generation}: every selection weight is zero")]
    DegenerateEnsemble { generation: u32 },

    #[error("ODE integration failed: {0}")]
    Refinement(String),

    #[error("finite-difference solver: {0}")]
    FiniteDifference(String),

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
