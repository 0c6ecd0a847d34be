use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cells::{inject, Model};
use crate::error::{Error, Result};
use crate::optimizers::{lbfgs_minimize, LbfgsConfig, LbfgsStop};
use crate::rng::{derive_seed, seeded};
use crate::solvers::{solve_model, SolverConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    /// Start from the encoder output.
    Encoded,
    /// Start from standard normal noise.
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "fifty")]
    pub updates: usize,
    /// Independent attacks; the first uses `init`, later ones normal noise.
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default = "encoded")]
    pub init: AttackInit,
    #[serde(default)]
    pub seed: u64,
}

fn fifty() -> usize {
    50
}
fn one() -> usize {
    1
}
fn encoded() -> AttackInit {
    AttackInit::Encoded
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            updates: fifty(),
            restarts: one(),
            init: encoded(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RestartOutcome {
    pub attacked_aa: f64,
    pub diverged: bool,
    pub stop: LbfgsStop,
    pub updates: usize,
    /// Surrogate objective before and after the L-BFGS run.
    pub objective: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Cosine between `FIX(x, 0)` and the fixed point from the adversarial
    /// initialization (worst restart).
    pub attacked_aa: f64,
    /// Fixed point reached from the adversarial initialization.
    pub attacked_state: Tensor,
    pub canonical_state: Tensor,
    /// The worst restart's solve diverged; its score uses the last finite
    /// iterate and the attack counts as successful.
    pub diverged: bool,
    pub restarts: Vec<RestartOutcome>,
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.norm() * b.norm();
    if d > 0.0 && d.is_finite() {
        (a.dot(b) / d).clamp(-1.0, 1.0)
    } else {
        -1.0
    }
}

/// Searches for an initialization whose solve ends far from the canonical
/// fixed point.
///
/// The surrogate `cos(z, f^T(x, z))`, with `T` the solver budget and `f^T`
/// a traced plain unroll, is minimized over `z` with L-BFGS starting from
/// `FIX(x, init)`. The result is scored with the configured solver.
pub fn adversarial_attack<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    solver: &SolverConfig,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if x.shape()[0] != 1 {
        return Err(Error::Config(format!(
            "attacks run one example at a time, got batch {}",
            x.shape()[0]
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    let shape = model.state_shape(x)?;
    let injected = inject(model, x)?;
    if cfg.init == AttackInit::Encoded && injected.shape() != shape.as_slice() {
        return Err(Error::Config(format!(
            "encoded init {:?} does not match state {:?}",
            injected.shape(),
            shape
        )));
    }
    let canonical = solve_model(model, x, &Tensor::zeros(&shape), solver)?.final_state;
    let depth = solver.max_iters;
    let lbfgs = LbfgsConfig::new(cfg.updates);

    let objective = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape)?;
        let inj = tape.constant(injected.clone());
        let z0 = tape.input(Tensor::new(shape.clone(), z.to_vec())?);
        let mut zt = z0;
        for _ in 0..depth {
            zt = model.step(&mut tape, &bound, inj, zt)?;
        }
        let c = tape.cosine_similarity(z0, zt)?;
        let value = tape.value(c).item();
        let g = tape.backward(c)?;
        let grad = g
            .get(z0)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; z.len()]);
        Ok((value, grad))
    };

    let mut best: Option<(f64, Tensor, bool)> = None;
    let mut outcomes = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let start = if r == 0 && cfg.init == AttackInit::Encoded {
            injected.clone()
        } else {
            let mut rng = seeded(derive_seed(cfg.seed, r as u64));
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(shape.clone(), v)?
        };
        let z1 = solve_model(model, x, &start, solver)?.final_state;
        let res = lbfgs_minimize(objective, z1.data(), &lbfgs)?;
        let z_adv = Tensor::new(shape.clone(), res.x.clone())?;
        let tr = solve_model(model, x, &z_adv, solver)?;
        let diverged = tr.diverged(0);
        let aa = cosine(&canonical, &tr.final_state);
        outcomes.push(RestartOutcome {
            attacked_aa: aa,
            diverged,
            stop: res.stop,
            updates: res.updates,
            objective: (res.trace[0], res.value),
        });
        let worse = match &best {
            None => true,
            Some((b, _, bd)) => (diverged && !bd) || (diverged == *bd && aa < *b),
        };
        if worse {
            best = Some((aa, tr.final_state, diverged));
        }
    }
    let (attacked_aa, attacked_state, diverged) = best.expect("at least one restart");
    Ok(AttackResult {
        attacked_aa,
        attacked_state,
        canonical_state: canonical,
        diverged,
        restarts: outcomes,
    })
}
