//! Backward passes for equilibrium models.
//!
//! Unrolled and truncated backprop trace cell applications on the tape. The
//! implicit estimators (IFT, Jacobian-free, phantom) start from a state the
//! forward solver already produced and never trace the solve itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cells::{apply_cell, inject, Bound, Model, ParamGrads};
use crate::error::{Error, Result};
use crate::solvers::{anderson_solve, SolverConfig, SolverTrace, Termination};
use crate::tensor::Tensor;

/// Scalar loss built on top of the readout output.
pub type LossFn<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    UnrolledBp,
    TruncatedBp,
    Ift,
    JacobianFree,
    Phantom,
}

impl Estimator {
    /// True for estimators that consume a solver output instead of tracing
    /// the forward iterations.
    pub fn is_implicit(self) -> bool {
        matches!(self, Estimator::Ift | Estimator::JacobianFree | Estimator::Phantom)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::UnrolledBp => "unrolled_bp",
            Estimator::TruncatedBp => "truncated_bp",
            Estimator::Ift => "ift",
            Estimator::JacobianFree => "jacobian_free",
            Estimator::Phantom => "phantom",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unrolled_bp" => Ok(Estimator::UnrolledBp),
            "truncated_bp" => Ok(Estimator::TruncatedBp),
            "ift" => Ok(Estimator::Ift),
            "jacobian_free" => Ok(Estimator::JacobianFree),
            "phantom" => Ok(Estimator::Phantom),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradConfig {
    pub estimator: Estimator,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    /// Solver for the adjoint recursion of the IFT estimator.
    #[serde(default = "default_adjoint")]
    pub adjoint: SolverConfig,
    /// Damping on the Jacobian term of the adjoint recursion.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub phantom_lambda: f64,
    #[serde(default = "default_phantom_steps")]
    pub phantom_steps: usize,
}

fn default_keep() -> f64 {
    0.5
}
fn default_adjoint() -> SolverConfig {
    SolverConfig::anderson(10).with_memory(3)
}
fn default_gamma() -> f64 {
    0.8
}
fn default_lambda() -> f64 {
    0.75
}
fn default_phantom_steps() -> usize {
    2
}

impl GradConfig {
    pub fn new(estimator: Estimator) -> Self {
        Self {
            estimator,
            keep_fraction: default_keep(),
            adjoint: default_adjoint(),
            gamma: default_gamma(),
            phantom_lambda: default_lambda(),
            phantom_steps: default_phantom_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.keep_fraction) {
            return Err(Error::Config(format!(
                "keep_fraction {} must lie in (0, 1]",
                self.keep_fraction
            )));
        }
        if !unit(self.gamma) {
            return Err(Error::Config(format!("gamma {} must lie in (0, 1]", self.gamma)));
        }
        if !unit(self.phantom_lambda) {
            return Err(Error::Config(format!(
                "phantom_lambda {} must lie in (0, 1]",
                self.phantom_lambda
            )));
        }
        if self.phantom_steps == 0 {
            return Err(Error::Config("phantom_steps must be at least 1".into()));
        }
        self.adjoint.validate()
    }
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: f64,
    pub grads: ParamGrads,
    /// Readout output at `state`.
    pub output: Tensor,
    /// State the loss was evaluated at.
    pub state: Tensor,
    /// Adjoint solve trace (IFT only).
    pub adjoint: Option<SolverTrace>,
}

/// Number of traced iterations out of `depth` for a keep fraction.
pub fn traced_steps(depth: usize, keep_fraction: f64) -> usize {
    let k = (keep_fraction * depth as f64 - 1e-9).ceil() as usize;
    k.clamp(1, depth)
}

/// Exact gradient through `depth` weight-tied applications from `z0`.
pub fn grad_unrolled<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z0: &Tensor,
    depth: usize,
    loss: &LossFn,
) -> Result<GradResult> {
    grad_truncated(model, x, z0, depth, 1.0, loss)
}

/// Runs `depth` applications but only traces the last
/// `ceil(keep_fraction * depth)`.
pub fn grad_truncated<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z0: &Tensor,
    depth: usize,
    keep_fraction: f64,
    loss: &LossFn,
) -> Result<GradResult> {
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction {keep_fraction} must lie in (0, 1]"
        )));
    }
    let traced = traced_steps(depth, keep_fraction);
    let mut z = z0.clone();
    if traced < depth {
        let inj = inject(model, x)?;
        for _ in 0..depth - traced {
            z = apply_cell(model, &inj, &z)?;
        }
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let inj = model.encode(&mut tape, &bound, x)?;
    let mut zv = tape.constant(z);
    for _ in 0..traced {
        zv = model.step(&mut tape, &bound, inj, zv)?;
    }
    finish_loss(model, tape, &bound, zv, loss)
}

/// Readout, loss and a full backward sweep from state `zv`.
fn finish_loss<M: Model + ?Sized>(
    model: &M,
    mut tape: Tape,
    bound: &Bound,
    zv: Var,
    loss: &LossFn,
) -> Result<GradResult> {
    let out = model.readout(&mut tape, bound, zv)?;
    let l = loss(&mut tape, out)?;
    let value = checked_loss(&tape, l)?;
    let grads = tape.backward(l)?;
    Ok(GradResult {
        loss: value,
        grads: bound.collect(&tape, &grads),
        output: tape.value(out).clone(),
        state: tape.value(zv).clone(),
        adjoint: None,
    })
}

fn checked_loss(tape: &Tape, l: Var) -> Result<f64> {
    let v = tape.value(l);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "loss must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    let value = v.item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok(value)
}

/// Loss at `z_star` with its state cotangent and the direct (readout)
/// parameter gradient.
struct StateLoss {
    loss: f64,
    output: Tensor,
    cotangent: Tensor,
    direct: ParamGrads,
}

fn loss_at_state<M: Model + ?Sized>(model: &M, z_star: &Tensor, loss: &LossFn) -> Result<StateLoss> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let zv = tape.input(z_star.clone());
    let out = model.readout(&mut tape, &bound, zv)?;
    let l = loss(&mut tape, out)?;
    let value = checked_loss(&tape, l)?;
    let grads = tape.backward(l)?;
    let cotangent = grads
        .get(zv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(z_star.shape()));
    Ok(StateLoss {
        loss: value,
        output: tape.value(out).clone(),
        cotangent,
        direct: bound.collect(&tape, &grads),
    })
}

fn add_grads(into: &mut ParamGrads, other: ParamGrads) -> Result<()> {
    for (name, g) in other {
        match into.get_mut(&name) {
            Some(acc) => acc.accumulate(&g)?,
            None => {
                into.insert(name, g);
            }
        }
    }
    Ok(())
}

/// One traced application `f(x, z_star)` with `z_star` as a gradient leaf.
struct Linearization {
    tape: Tape,
    bound: Bound,
    z: Var,
    fz: Var,
}

impl Linearization {
    fn new<M: Model + ?Sized>(model: &M, x: &Tensor, z_star: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let inj = model.encode(&mut tape, &bound, x)?;
        let z = tape.input(z_star.clone());
        let fz = model.step(&mut tape, &bound, inj, z)?;
        Ok(Self { tape, bound, z, fz })
    }

    /// `u^T df/dz`.
    fn vjp_state(&self, u: &Tensor) -> Result<Tensor> {
        let g = self.tape.vjp_wrt(self.fz, u, &[self.z])?;
        Ok(g.get(self.z)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(u.shape())))
    }

    /// `u^T df/dw`.
    fn vjp_params(&self, u: &Tensor) -> Result<ParamGrads> {
        let targets: Vec<Var> = self.bound.leaves().iter().map(|(_, v)| *v).collect();
        let g = self.tape.vjp_wrt(self.fz, u, &targets)?;
        Ok(self.bound.collect(&self.tape, &g))
    }
}

/// Solves `u = g + gamma * u^T df/dz` at `z_star` and returns `u^T df/dw`
/// with the adjoint trace.
pub fn ift_pullback<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    cotangent: &Tensor,
    gamma: f64,
    adjoint: &SolverConfig,
) -> Result<(ParamGrads, SolverTrace)> {
    let lin = Linearization::new(model, x, z_star)?;
    let trace = anderson_solve(
        |u| {
            let ju = lin.vjp_state(u)?;
            cotangent.add(&ju.scaled(gamma))
        },
        cotangent,
        adjoint,
    )?;
    if trace.termination == Termination::Diverged {
        let worst = trace
            .final_residuals()
            .into_iter()
            .fold(0.0f64, |m, r| if r.is_nan() { f64::NAN } else { m.max(r) });
        return Err(Error::Numeric(format!(
            "adjoint solve diverged, adjoint residual {worst:e}"
        )));
    }
    let grads = lin.vjp_params(&trace.final_state)?;
    Ok((grads, trace))
}

/// `g^T df/dw` at `z_star`: the inverse Jacobian replaced by identity.
pub fn jacobian_free_pullback<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    cotangent: &Tensor,
) -> Result<ParamGrads> {
    Linearization::new(model, x, z_star)?.vjp_params(cotangent)
}

/// Implicit-function gradient at a solver output.
pub fn grad_ift<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    loss: &LossFn,
    cfg: &GradConfig,
) -> Result<GradResult> {
    cfg.validate()?;
    let sl = loss_at_state(model, z_star, loss)?;
    let (implicit, trace) = ift_pullback(model, x, z_star, &sl.cotangent, cfg.gamma, &cfg.adjoint)?;
    let mut grads = sl.direct;
    add_grads(&mut grads, implicit)?;
    Ok(GradResult {
        loss: sl.loss,
        grads,
        output: sl.output,
        state: z_star.clone(),
        adjoint: Some(trace),
    })
}

pub fn grad_jacobian_free<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    loss: &LossFn,
) -> Result<GradResult> {
    let sl = loss_at_state(model, z_star, loss)?;
    let implicit = jacobian_free_pullback(model, x, z_star, &sl.cotangent)?;
    let mut grads = sl.direct;
    add_grads(&mut grads, implicit)?;
    Ok(GradResult {
        loss: sl.loss,
        grads,
        output: sl.output,
        state: z_star.clone(),
        adjoint: None,
    })
}

/// Traces `k` damped steps `z <- lambda f(x, z) + (1 - lambda) z` from
/// `z_star` (a constant) on a fresh tape.
fn phantom_tape<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    lambda: f64,
    k: usize,
) -> Result<(Tape, Bound, Var)> {
    if !(lambda > 0.0 && lambda <= 1.0) || k == 0 {
        return Err(Error::Config(format!(
            "phantom needs lambda in (0, 1] and k >= 1, got {lambda}, {k}"
        )));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let inj = model.encode(&mut tape, &bound, x)?;
    let mut z = tape.constant(z_star.clone());
    for _ in 0..k {
        let fz = model.step(&mut tape, &bound, inj, z)?;
        z = if lambda == 1.0 {
            fz
        } else {
            let a = tape.scale(fz, lambda)?;
            let b = tape.scale(z, 1.0 - lambda)?;
            tape.add(a, b)?
        };
    }
    Ok((tape, bound, z))
}

/// Gradient through `k` damped steps taken from `z_star`.
pub fn grad_phantom<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    loss: &LossFn,
    lambda: f64,
    k: usize,
) -> Result<GradResult> {
    let (tape, bound, z) = phantom_tape(model, x, z_star, lambda, k)?;
    finish_loss(model, tape, &bound, z, loss)
}

/// Phantom pullback of a cotangent placed on the last damped step. Returns
/// the state reached and the parameter gradient.
pub fn phantom_pullback<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    cotangent: &Tensor,
    lambda: f64,
    k: usize,
) -> Result<(Tensor, ParamGrads)> {
    let (tape, bound, z) = phantom_tape(model, x, z_star, lambda, k)?;
    let g = tape.vjp(z, cotangent)?;
    Ok((tape.value(z).clone(), bound.collect(&tape, &g)))
}

/// Pulls a cotangent on a solver output back to the parameters with the
/// configured implicit estimator.
pub fn pull_back_state<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z_star: &Tensor,
    cotangent: &Tensor,
    cfg: &GradConfig,
) -> Result<ParamGrads> {
    match cfg.estimator {
        Estimator::Ift => Ok(ift_pullback(model, x, z_star, cotangent, cfg.gamma, &cfg.adjoint)?.0),
        Estimator::JacobianFree => jacobian_free_pullback(model, x, z_star, cotangent),
        Estimator::Phantom => Ok(phantom_pullback(
            model,
            x,
            z_star,
            cotangent,
            cfg.phantom_lambda,
            cfg.phantom_steps,
        )?
        .1),
        e => Err(Error::Contract(format!("{e} is not an implicit estimator"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traced_step_counts() {
        assert_eq!(traced_steps(10, 0.5), 5);
        assert_eq!(traced_steps(10, 1.0), 10);
        assert_eq!(traced_steps(7, 0.5), 4);
        assert_eq!(traced_steps(3, 0.01), 1);
    }

    #[test]
    fn config_bounds() {
        assert!(GradConfig::new(Estimator::Ift).validate().is_ok());
        let mut c = GradConfig::new(Estimator::Phantom);
        c.phantom_steps = 0;
        assert!(c.validate().is_err());
        let mut c = GradConfig::new(Estimator::Ift);
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        assert!("neumann".parse::<Estimator>().is_err());
    }
}
