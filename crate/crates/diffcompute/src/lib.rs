//! Minimal reverse-mode differentiation for 2D encoder-decoder networks.
//!
//! The op set is deliberately small: same-padded convolution, 2x2 transposed
//! convolution, 2x2 max pooling, ReLU, batch norm, channel softmax, elementwise
//! arithmetic, reductions, channel concatenation and user-defined [`CustomOp`]s
//! with hand-written adjoints. Values are `f64` and every reduction runs in a
//! fixed order, so identical inputs give bit-identical values and gradients.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_difference_check, FdProbe, FdReport, ProbeStatus};
pub use graph::{BatchNormMode, BatchStats, CustomOp, Graph, NodeId};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("node {0} does not exist on this graph")]
    UnknownNode(usize),
    #[error("gradients requested before backward was run")]
    BackwardNotRun,
}

impl GraphError {
    pub fn shape(op: &'static str, detail: String) -> Self {
        GraphError::Shape { op, detail }
    }
}
