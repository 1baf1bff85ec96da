//! Differentiable tensor substrate: dense tensors, a tape-based reverse-mode
//! graph, convolution kernels, parameter storage and a finite-difference oracle.

mod conv;
mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use gradcheck::{grad_check, grad_check_params, relative_error, Coordinates, ParamCheck, GRADIENT_FLOOR};
pub use graph::{sigmoid, silu, softmax_rows, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{MatMut, MatRef, Scalar};
pub use tensor::Tensor;
