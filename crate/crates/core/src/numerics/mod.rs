//! Dense tensors, parameters and a reverse-mode autodiff tape.

mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GRAD_CHECK_EPS};
pub use graph::{AttnSpec, ConvGeom, Grads, Graph, MapGeom, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

/// Epsilon added to the variance in every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;
