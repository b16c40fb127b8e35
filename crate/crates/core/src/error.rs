use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite {what}")]
    NonFiniteValue { what: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("position {position} out of range for length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("exp(psi * A) would overflow: psi * A = {0} exceeds 50, use a smaller psi")]
    ExpOverflow(f64),

    #[error("reward failed for completion {completion:?}: {reason}")]
    Reward {
        completion: alloc::vec::Vec<u32>,
        reason: String,
    },

    #[error("old-policy refresh at step {step} is off schedule (mu = {mu})")]
    OffSchedule { step: u64, mu: u64 },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
