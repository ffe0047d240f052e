//! Dense `f64` tensors, a recording autodiff graph, parameters with optional
//! nonnegativity constraints, Adam, and finite-difference gradient checks.

mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod param;
mod tensor;

pub use error::TensorError;
pub use graph::{log_sigmoid, sigmoid, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{Constraint, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
