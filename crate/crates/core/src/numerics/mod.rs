//! Dense tensors, small kernels with analytic backwards, and gradient checking.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod sample;
mod tensor;

pub use conv::{ConvSpec, Pad};
pub use gradcheck::{grad_check, BackwardChain, Checkable, GradReport};
pub use ops::{grouped_softmax, linear};
pub use sample::{bilinear_sample, Border, Taps};
pub use tensor::Tensor;
