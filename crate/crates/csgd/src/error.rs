//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor dimensions that must agree do not.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A scalar argument or tensor content is out of its legal range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A network description violates the layer-graph rules.
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    /// A configuration file failed to parse or validate.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A gradient was requested for a tensor the tape never saw.
    #[error("tensor (id {0}) is not on the gradient tape")]
    NotOnTape(u64),

    /// A pacesetter/follower relationship would be broken.
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    /// A checkpoint file is malformed or belongs to a different model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A dataset file is malformed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// The trimmed model failed the logit-equivalence gate.
    #[error("equivalence gate failed: max logit difference {max_diff:e} exceeds {tolerance:e}")]
    EquivalenceGate { max_diff: f32, tolerance: f32 },

    /// Training produced a non-finite value.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for validation/usage errors,
    /// 2 when a lossless-trim equivalence gate fails.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EquivalenceGate { .. } => 2,
            _ => 1,
        }
    }
}
