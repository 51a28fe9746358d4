//! Dense tensors, a differentiable tape, Adam and a reproducible RNG.

mod optim;
mod rng;
mod tape;
mod tensor;

pub use optim::{AdamConfig, AdamState, Parameter, ParamRole};
pub use rng::RngStream;
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("sqrt of negative value {value}")]
    SqrtDomain { value: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("variable belongs to a different tape")]
    DetachedTape,
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid optimizer setting: {0}")]
    InvalidHyperparameter(String),
}
