//! Tensor algebra with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod kernels;
mod real;
mod tensor;

pub use gradcheck::{compare_gradient, grad_check, grad_check_inputs, CoordinateSample, GradCheckReport};
pub use graph::{
    bce_grad, bce_term, sigmoid, Activation, BatchStats, Graph, NormMode, RunningStats, Var, BATCH_NORM_EPS,
    BATCH_NORM_MOMENTUM, BCE_EPS, LAYER_NORM_EPS,
};
pub use real::{DType, Real};
pub use tensor::{numel, Tensor};
