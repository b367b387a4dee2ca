//! Tensors, a reverse-mode differentiation engine, and optimizers.

mod graph;
mod ops;
mod optim;
mod tensor;

pub mod gradcheck;

pub use graph::{Evaluation, Feed, Graph, GraphBuilder, GraphOps, Mode, Node, NodeId, Tape};
pub use ops::{log_softmax_row, sigmoid, softmax_row, Op, Unary};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::{ParamSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("invalid tensor: {0}")]
    Tensor(String),
    #[error("node %{node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("no value fed for input \"{0}\"")]
    MissingInput(String),
    #[error("input \"{name}\" expects shape {expected:?}, got {got:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("no binding for parameter \"{0}\"")]
    MissingParam(String),
    #[error("parameter \"{name}\" expects shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node %{node} ({op}) has no gradient")]
    Unsupported { node: usize, op: &'static str },
    #[error("non-finite values in \"{0}\"")]
    NonFinite(String),
    #[error("unknown output \"{0}\"")]
    UnknownOutput(String),
    #[error("slot mismatch: {0}")]
    SlotMismatch(String),
    #[error("duplicate name \"{0}\"")]
    Duplicate(String),
}
