use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
#[derive(Default)]
pub enum LrPolicy {
    Constant,
    /// Halve at 50% and again at 75% of the run.
    #[default]
    PrefixSumHalves,
    /// Multiply by `factor` every `every` steps.
    StepDecay { every: usize, factor: f64 },
}


/// Learning rate at 0-based `step` of `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, policy: LrPolicy) -> f64 {
    match policy {
        LrPolicy::Constant => base_lr,
        LrPolicy::PrefixSumHalves => {
            let mut lr = base_lr;
            if 2 * step >= total {
                lr *= 0.5;
            }
            if 4 * step >= 3 * total {
                lr *= 0.5;
            }
            lr
        }
        LrPolicy::StepDecay { every, factor } => {
            if every == 0 {
                base_lr
            } else {
                base_lr * factor.powi((step / every) as i32)
            }
        }
    }
}
