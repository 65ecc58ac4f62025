//! Minimal dense-tensor engine with tape-based reverse-mode autodiff.
//!
//! Everything is `f64`, row-major, and broadcasting is limited to last-axis
//! affine terms (`add_bias`, layer-norm gain/bias) and per-row scaling.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use attention::{multi_head_attention, scaled_dot_product_attention, AttentionMask, AttentionParams};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{GradSink, Gradients, Graph, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} is empty")]
    EmptyAxis { op: &'static str, axis: usize },
    #[error("{op}: range {start}+{len} exceeds size {size}")]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        size: usize,
    },
    #[error("{op}: index {index} out of bounds for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{0}: needs at least one input")]
    Empty(&'static str),
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("attention row {0} is fully masked")]
    MaskedRow(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
