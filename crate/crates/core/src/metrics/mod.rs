//! Path-independence diagnostics.

mod aa;
mod attack;
mod curves;
mod probit;
mod similarity;

pub use aa::{aa_score, aa_score_from, AaOptions, AaReport, Pairing, AA_CSV_HEADER};
pub use attack::{adversarial_attack, AttackConfig, AttackInit, AttackResult, RestartOutcome};
pub use curves::{
    random_directions, residual_curve, residual_curve_model, trajectory_projection,
    trajectory_projection_model, Projection, ResidualCurves,
};
pub use probit::{probit, PROBIT_CAP, PROBIT_FLOOR};
pub use similarity::{aa_score_kernel, KernelConfig, SimilarityKernel};
