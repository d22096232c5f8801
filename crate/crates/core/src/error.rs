use thiserror::Error;

/// Errors surfaced by the library. Shape or graph misuse inside the autodiff
/// tape is a programming error and panics instead.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unknown token {0:?} (closed vocabulary)")]
    UnknownToken(String),

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("injected vector has dimension {got}, model expects {want}")]
    BadInjection { got: usize, want: usize },

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("non-finite value in {0}; step aborted")]
    NonFinite(&'static str),

    #[error("checkpoint is corrupt or not a checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("checkpoint was written by an incompatible version ({0})")]
    CheckpointVersion(u32),

    #[error("generator could not satisfy constraints after {0} attempts")]
    GeneratorExhausted(usize),

    #[error("dataset record {line}: {msg}")]
    BadRecord { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
