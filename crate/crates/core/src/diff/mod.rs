//! Dense tensors, reverse-mode differentiation, gradient checking,
//! optimization and checkpoint persistence.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::AdamW;
pub use params::{Gradients, ParameterStore};
pub use tensor::Tensor;
