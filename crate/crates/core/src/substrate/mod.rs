//! Minimal differentiable dense-tensor engine.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod primitive;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use primitive::{window_out_len, Primitive};
pub use tensor::Tensor;
