//! Dense tensors, reverse-mode differentiation, Adam, and a
//! finite-difference gradient oracle.

mod adam;
mod gradcheck;
mod graph;
mod real;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    OutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("variable does not belong to this graph")]
    ForeignVar,
    #[error("backward already ran on this graph; record a new forward pass")]
    GraphConsumed,
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss does not depend on any parameter")]
    Detached,
}
