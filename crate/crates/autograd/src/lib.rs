//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: it covers the operations needed by
//! convolutional enhancement, detection and routing networks (broadcast
//! arithmetic, reductions, 2-D convolution, bilinear resampling, matrix
//! products) and nothing else.

pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub mod gradcheck;

pub use ops::{concat, sigmoid, softplus};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
