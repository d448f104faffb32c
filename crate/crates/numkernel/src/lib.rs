//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! The kernel is deliberately small: 64-bit floats, tensors of rank 1 or 2,
//! a flat Wengert tape recorded during the forward pass and replayed in
//! reverse, plus the sparse-adjacency products and segment reductions that
//! graph neural networks need. There is no broadcasting beyond row/column
//! vectors, no GPU path, and no mixed precision.
//!
//! Typical usage: wrap persistent learnable tensors in [`Param`], build a
//! [`Tape`] per forward pass, compose [`Val`] handles with the tape's
//! operations, and call [`Tape::backward`] on a scalar loss to accumulate
//! gradients into the parameters.

mod gradcheck;
mod param;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use param::Param;
pub use sparse::{EdgeEndpoints, SparseAdj};
pub use tape::{ReduceMode, Tape, Val};
pub use tensor::{argmax, Tensor};

use thiserror::Error;

/// Errors surfaced by kernel operations.
#[derive(Error, Debug)]
pub enum KernelError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("softmax temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),
    #[error("edge ({src}, {dst}) out of range for {num_nodes} nodes")]
    EdgeOutOfRange {
        src: usize,
        dst: usize,
        num_nodes: usize,
    },
    #[error("duplicate weighted edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge weight count {weights} does not match edge count {edges}")]
    EdgeWeightCount { weights: usize, edges: usize },
    #[error("segment {0} is empty")]
    EmptySegment(usize),
    #[error("segment id {id} out of range for {num_segments} segments")]
    SegmentOutOfRange { id: usize, num_segments: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on a consumed tape")]
    TapeConsumed,
    #[error("values from different tapes cannot be combined")]
    TapeMismatch,
    #[error("row index {row} out of range for {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("column index {col} out of range for {cols} columns")]
    ColOutOfRange { col: usize, cols: usize },
    #[error("{op}: operation needs at least one input")]
    EmptyInput { op: &'static str },
}

pub type Result<T> = std::result::Result<T, KernelError>;
