use crate::shape::Shape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("{op}: invalid input shape {shape}: {reason}")]
    BadShape { op: &'static str, shape: Shape, reason: String },

    #[error("{op}: invalid argument: {reason}")]
    BadArg { op: &'static str, reason: String },

    #[error("non-finite values in input to {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got {shape}")]
    NonScalarLoss { shape: Shape },

    #[error("backward called twice on the same graph without a new forward")]
    BackwardTwice,

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    #[error("non-finite loss: {breakdown}")]
    NonFiniteLoss { breakdown: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation produced no matched image pairs")]
    EmptyEval,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
