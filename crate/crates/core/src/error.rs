use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("temporal factor {0} is outside [0, 1]")]
    TemporalFactorRange(f64),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid goal state: {0}")]
    InvalidGoal(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("incomplete episode: expected {expected} transitions, got {got}")]
    IncompleteEpisode { expected: usize, got: usize },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("numerical abort at episode {episode}: {what}")]
    NumericalAbort { episode: usize, what: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
