use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::cells::{apply_cell, inject, Model, ParamGrads};
use crate::error::{Error, Result};
use crate::gradients::{pull_back_state, traced_steps, Estimator, GradConfig};
use crate::solvers::{solve_model, SolverConfig, DIVERGENCE_NORM};
use crate::tensor::Tensor;

/// Per-example Bernoulli(0.5) draw; `true` means a zero start.
pub fn mixed_init_mask<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<bool> {
    (0..batch).map(|_| rng.gen_bool(0.5)).collect()
}

/// Initial states: zero rows where the mask is set, standard normal elsewhere.
pub fn intervene_mixed_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mask = mixed_init_mask(shape[0], rng);
    let mut z = Tensor::zeros(shape);
    let n = z.row_len();
    let d = z.data_mut();
    for (i, zero) in mask.iter().enumerate() {
        if !zero {
            for v in &mut d[i * n..(i + 1) * n] {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    z
}

/// Uniform training depth over `min..=max`.
pub fn intervene_random_depth<R: Rng + ?Sized>(min: usize, max: usize, rng: &mut R) -> usize {
    rng.gen_range(min..=max)
}

#[derive(Clone, Debug)]
pub struct PenaltyValue {
    pub value: f64,
    /// `d value / d states[a]` for every init.
    pub cotangents: Vec<Tensor>,
    /// Ordered pairs dropped because one side diverged.
    pub excluded_pairs: usize,
}

/// Mean over examples of `sum_{a != b} <z_a, z_b> / n_pairs`, where the sum
/// runs over ordered pairs whose solves both stayed finite. With no
/// exclusions `n_pairs = k^2 - k`.
pub fn penalty_from_states(states: &[Tensor], valid: &[Vec<bool>]) -> Result<PenaltyValue> {
    let k = states.len();
    if k < 2 || valid.len() != k {
        return Err(Error::Config("alignment penalty needs k >= 2 states".into()));
    }
    let batch = states[0].shape()[0];
    let n = states[0].row_len();
    let mut value = 0.0;
    let mut cot: Vec<Vec<f64>> = vec![vec![0.0; batch * n]; k];
    let mut excluded = 0;
    let mut weights = vec![0.0; batch];
    let mut counted = 0usize;
    for i in 0..batch {
        let ok: Vec<usize> = (0..k).filter(|&a| valid[a][i]).collect();
        excluded += k * (k - 1) - ok.len() * ok.len().saturating_sub(1);
        let pairs = ok.len() * ok.len().saturating_sub(1);
        if pairs > 0 {
            weights[i] = 1.0 / pairs as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Ok(PenaltyValue {
            value: 0.0,
            cotangents: states.iter().map(|s| Tensor::zeros(s.shape())).collect(),
            excluded_pairs: excluded,
        });
    }
    for i in 0..batch {
        if weights[i] == 0.0 {
            continue;
        }
        let w = weights[i] / counted as f64;
        for a in 0..k {
            if !valid[a][i] {
                continue;
            }
            let za = states[a].row(i);
            for b in 0..k {
                if b == a || !valid[b][i] {
                    continue;
                }
                let zb = states[b].row(i);
                value += w * za.iter().zip(zb).map(|(x, y)| x * y).sum::<f64>();
                // Each unordered pair appears twice, once per order.
                for (c, y) in cot[a][i * n..(i + 1) * n].iter_mut().zip(zb) {
                    *c += 2.0 * w * y;
                }
            }
        }
    }
    let cotangents = cot
        .into_iter()
        .zip(states)
        .map(|(c, s)| Tensor::new(s.shape().to_vec(), c))
        .collect::<Result<_>>()?;
    Ok(PenaltyValue {
        value,
        cotangents,
        excluded_pairs: excluded,
    })
}

#[derive(Clone, Debug)]
pub struct PenaltyResult {
    pub value: f64,
    pub grads: ParamGrads,
    pub excluded_pairs: usize,
}

fn row_ok(row: &[f64]) -> bool {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    n.is_finite() && n <= DIVERGENCE_NORM
}

/// Fixed points from `k` Gaussian inits and the penalty gradient through
/// every solve. Implicit estimators pull the cotangent back from the solver
/// output; the traced estimators differentiate the (truncated) unroll.
pub fn alignment_penalty<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor,
    k: usize,
    solver: &SolverConfig,
    grad: &GradConfig,
    rng: &mut R,
) -> Result<PenaltyResult> {
    let shape = model.state_shape(x)?;
    let inits: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&shape, rng)).collect();
    let batch = shape[0];
    let mut states = Vec::with_capacity(k);
    let mut valid = Vec::with_capacity(k);
    for z0 in &inits {
        let z = if grad.estimator.is_implicit() {
            let tr = solve_model(model, x, z0, solver)?;
            let ok: Vec<bool> = (0..batch).map(|i| !tr.diverged(i)).collect();
            valid.push(ok);
            tr.final_state
        } else {
            let z = unroll(model, x, z0, solver.max_iters)?;
            valid.push((0..batch).map(|i| row_ok(z.row(i))).collect());
            z
        };
        states.push(z);
    }
    // Zero divergent rows so they cannot leak non-finite values.
    for (s, ok) in states.iter_mut().zip(&valid) {
        let n = s.row_len();
        let d = s.data_mut();
        for (i, good) in ok.iter().enumerate() {
            if !good {
                d[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let pv = penalty_from_states(&states, &valid)?;
    let mut grads = ParamGrads::new();
    for (a, cot) in pv.cotangents.iter().enumerate() {
        let g = if grad.estimator.is_implicit() {
            pull_back_state(model, x, &states[a], cot, grad)?
        } else {
            let keep = if grad.estimator == Estimator::UnrolledBp {
                1.0
            } else {
                grad.keep_fraction
            };
            unroll_pullback(model, x, &inits[a], solver.max_iters, keep, cot)?
        };
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.accumulate(&t)?,
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    Ok(PenaltyResult {
        value: pv.value,
        grads,
        excluded_pairs: pv.excluded_pairs,
    })
}

fn unroll<M: Model + ?Sized>(model: &M, x: &Tensor, z0: &Tensor, depth: usize) -> Result<Tensor> {
    let inj = inject(model, x)?;
    let mut z = z0.clone();
    for _ in 0..depth {
        z = apply_cell(model, &inj, &z)?;
    }
    Ok(z)
}

/// `cot^T d z_depth / dw` through the last `ceil(keep * depth)` steps.
fn unroll_pullback<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z0: &Tensor,
    depth: usize,
    keep: f64,
    cot: &Tensor,
) -> Result<ParamGrads> {
    let traced = traced_steps(depth, keep);
    let start = unroll(model, x, z0, depth - traced)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let inj = model.encode(&mut tape, &bound, x)?;
    let mut z = tape.constant(start);
    for _ in 0..traced {
        z = model.step(&mut tape, &bound, inj, z)?;
    }
    let g = tape.vjp(z, cot)?;
    Ok(bound.collect(&tape, &g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identical_unit_states_give_one_and_orthogonal_give_zero() {
        let e1 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let all = vec![vec![true]; 3];
        let same = penalty_from_states(&[e1.clone(), e1.clone(), e1.clone()], &all).unwrap();
        assert!((same.value - 1.0).abs() < 1e-15);
        let orth = penalty_from_states(&[e1, e2], &all[..2]).unwrap();
        assert_eq!(orth.value, 0.0);
    }

    #[test]
    fn divergent_inits_are_excluded_and_renormalized() {
        let e1 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let junk = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let valid = vec![vec![true], vec![true], vec![false]];
        let p = penalty_from_states(&[e1.clone(), e1, junk], &valid).unwrap();
        assert!((p.value - 1.0).abs() < 1e-15);
        assert_eq!(p.excluded_pairs, 4);
    }

    #[test]
    fn cotangent_matches_finite_differences() {
        let mut rng = seeded(3);
        let states: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 4], &mut rng)).collect();
        let valid = vec![vec![true, true]; 3];
        let p = penalty_from_states(&states, &valid).unwrap();
        let h = 1e-6;
        for a in 0..3 {
            for j in 0..8 {
                let mut plus = states.clone();
                plus[a].data_mut()[j] += h;
                let mut minus = states.clone();
                minus[a].data_mut()[j] -= h;
                let fd = (penalty_from_states(&plus, &valid).unwrap().value
                    - penalty_from_states(&minus, &valid).unwrap().value)
                    / (2.0 * h);
                assert!((fd - p.cotangents[a].data()[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fixed_depth_range_is_constant() {
        let mut rng = seeded(1);
        assert!((0..100).all(|_| intervene_random_depth(5, 5, &mut rng) == 5));
    }
}
