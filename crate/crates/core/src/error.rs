use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("backward called before a forward pass was recorded")]
    BackwardBeforeForward,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter layout mismatch: expected {expected} values, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("training diverged at iteration {iter}")]
    Diverged { iter: usize, trace: Box<crate::training::TrainTrace> },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed IDX file: {0}")]
    Idx(String),
    #[error("Cholesky factorization failed after jitter escalation")]
    Cholesky,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
