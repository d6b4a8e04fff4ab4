use thiserror::Error;

use crate::tensor::Dims;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("factorization mismatch: product of {sizes:?} is {product}, expected {channels}")]
    FactorizationMismatch {
        sizes: Vec<usize>,
        product: usize,
        channels: usize,
    },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Dims,
        right: Dims,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("kernel shape violation: {0}")]
    KernelShapeViolation(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("input too small: {0}")]
    InputTooSmall(String),
    #[error("unsupported op: {0}")]
    UnsupportedOp(String),
    #[error("no parameter named `{0}`")]
    MissingParam(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("tensor file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
