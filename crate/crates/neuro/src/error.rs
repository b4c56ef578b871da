use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuroError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("computation graph references a later node ({node} -> {input})")]
    GraphCycle { node: usize, input: usize },
    #[error("value {0} outside the open unit interval")]
    DomainError(f64),
    #[error("loss node must be a 1x1 scalar, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
