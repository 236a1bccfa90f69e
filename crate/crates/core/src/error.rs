use thiserror::Error;

/// Errors raised by the simulation, tuning and serialization layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not skew-symmetric (symmetric part {0:.3e})")]
    NotSkew(f64),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid waypoints: {0}")]
    InvalidWaypoints(String),

    #[error("singular linear system while solving {0}")]
    Singular(&'static str),

    #[error("simulation diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("every task in the batch crashed; update skipped")]
    AllCrashed,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
