//! Dense tensors and tape-based reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use graph::{Graph, Var};
pub use ops::{Mask, GELU_COEFF};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

