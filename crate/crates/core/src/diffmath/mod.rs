//! Dense tensors with reverse-mode differentiation.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_FLOOR};
pub use graph::{Grads, Graph, Var};
pub use params::{normal, orthogonal, Binding, ParameterStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
