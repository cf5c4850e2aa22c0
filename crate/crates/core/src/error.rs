use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error(
        "shape mismatch in {op}: node {left} has shape {left_shape:?}, node {right} has shape {right_shape:?}"
    )]
    ShapeMismatch {
        op: &'static str,
        left: usize,
        left_shape: Vec<usize>,
        right: usize,
        right_shape: Vec<usize>,
    },

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("backward seed node {node} is not scalar (shape {shape:?})")]
    NonScalarSeed { node: usize, shape: Vec<usize> },

    #[error("gradient check failed at element {index}: {reason}")]
    GradCheck { index: usize, reason: String },

    #[error("non-finite belief log-density for nested sample {index}")]
    NestedWeight { index: usize },

    #[error("particle degeneracy at depth {depth}")]
    Degeneracy { depth: usize },

    #[error("NaN weight increment for particle {particle}")]
    NanWeight { particle: usize },

    #[error("history impossible under all hypotheses")]
    ImpossibleHistory,

    #[error("invalid task set: {0}")]
    TaskSet(String),

    #[error("{0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in window {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
