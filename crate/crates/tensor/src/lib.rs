//! Dense tensors with a tape-based reverse-mode differentiator.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] through [`Var`] handles and differentiated with [`Var::backward`].
//! Only scalar-to-tensor broadcasting is implicit; every other shape change is
//! an explicit op ([`Var::broadcast_to`], [`Var::reshape`], ...).

mod conv;
mod error;
mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, DEFAULT_EPS};
pub use ops::concat;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Output extent of a strided convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}
