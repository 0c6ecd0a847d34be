//! Adam with global-norm clipping, step learning-rate schedules, and L-BFGS
//! with a strong-Wolfe line search.

mod adam;
mod lbfgs;
mod schedule;

pub use adam::{global_norm, AdamConfig, AdamState, StepInfo};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsResult, LbfgsStop};
pub use schedule::{lr_schedule, LrPolicy};
