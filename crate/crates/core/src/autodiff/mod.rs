//! Reverse-mode differentiation over dense tensors.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use kernels::{forward_kernel, Kernel};
pub use tape::{Grads, Tape, Var};
