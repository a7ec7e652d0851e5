use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient query budget: need {needed} 1D latents but the encoder owns {available} queries")]
    QueryBudget { needed: usize, available: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("size mismatch: header declares {declared} bytes of payload, file holds {actual}")]
    SizeMismatch { declared: u64, actual: u64 },

    #[error("geometry inconsistency: {0}")]
    GeometryInconsistency(String),

    #[error("config digest mismatch: checkpoint was written under a different configuration")]
    ConfigDigestMismatch,

    #[error("checkpoint field missing or malformed: {0}")]
    CheckpointFormat(String),

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: u64, detail: String },

    #[error("matrix not positive semi-definite: eigenvalue {0} below tolerance")]
    NotPsd(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
