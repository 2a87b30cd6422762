//! Dense `f64` tensors, the differentiable operation set and a
//! finite-difference gradient checker.

mod grid;
mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, GroupReport};
pub use grid::Grid;
pub use ops::{
    add, affine, concat_channels, conv2d, hadamard, maxpool2, relu, relu_unit, sigmoid, softmax,
    sub, tanh, upsample2,
};
pub use tape::{DifferentiableNode, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("max pooling needs even extents, got {height}×{width}")]
    OddExtent { height: usize, width: usize },
    #[error("loss must have shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
}
