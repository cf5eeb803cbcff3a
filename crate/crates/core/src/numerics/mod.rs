//! Tensors, kernels, and reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use kernels::{LAYERNORM_EPS, MASK_NEG};
pub use params::{BoundParams, ParamSet};
pub use tensor::Tensor;
