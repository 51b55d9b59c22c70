//! Double-precision tensors, kernels, a reverse-mode tape and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::Kernel;
pub use tape::{run_kernel, Tape, Var};
pub use tensor::Tensor;
