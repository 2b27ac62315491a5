//! Reverse-mode differentiable computation core: tensors, the recording
//! graph, parameter vectors, scalar objectives and their first- and
//! second-order derivative operators, plus checkpoint I/O.

pub mod checkpoint;
pub mod graph;
pub mod scalar;
pub mod tensor;
pub mod vector;

pub use graph::{Graph, Var};
pub use scalar::{eval, grad, grad_and_value, hvp, mixed_vjp, BlockVars, PreparedHvp, ScalarFn, ScalarFn2};
pub use tensor::Tensor;
pub use vector::{add, axpy, dot, norm, scale, sub, ParamVector};
