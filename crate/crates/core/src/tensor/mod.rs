//! Differentiable dense-array substrate.

pub mod archive;
mod conv;
mod dense;
pub mod gradcheck;
mod graph;
mod real;

pub use archive::{AnyTensor, Archive};
pub use dense::{numel, strides, Tensor};
pub use gradcheck::{grad_check, GradCheckOptions, GradReport, ParamReport};
pub use graph::{sigmoid, silu, softmax_in_place, softplus, FlopCounters, Gradients, Grads, Graph, Var};
pub use real::{DType, Real};
