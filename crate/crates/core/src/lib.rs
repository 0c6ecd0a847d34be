//! Weight-tied, input-injected equilibrium models with a suite of fixed-point
//! solvers, gradient estimators and path-independence diagnostics.

pub mod autodiff;
pub mod cells;
pub mod error;
pub mod gradients;
pub mod harness;
pub mod metrics;
pub mod optimizers;
pub mod rng;
pub mod tasks;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
