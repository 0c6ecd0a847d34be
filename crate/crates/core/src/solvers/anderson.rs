use std::collections::VecDeque;

use crate::error::Result;
use crate::solvers::{blown_up, check_shape, diff_norm, ExampleStatus, Progress, SolverConfig, SolverTrace};
use crate::tensor::Tensor;

/// Anderson acceleration with memory `m`.
///
/// Keeps the last `m` pairs `(z_j, f(z_j))` per example and moves to
/// `sum_j a_j f(z_j)`, where `a` minimizes `|sum_j a_j (f(z_j) - z_j)|` subject
/// to `sum_j a_j = 1`. The Gram matrix gets `ridge` times its mean diagonal
/// added to the diagonal, so regularization does not depend on residual scale.
/// If that system cannot be solved the step falls back to `f(z)`.
pub fn anderson_solve<F>(mut map: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverTrace>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let batch = z0.shape()[0];
    let n = z0.row_len();
    let mut z = z0.clone();
    let mut prog = Progress::new(batch, z0, cfg.record_trace);
    // Per example: recent (f(z_j), g_j = f(z_j) - z_j).
    let mut hist: Vec<VecDeque<(Vec<f64>, Vec<f64>)>> = vec![VecDeque::new(); batch];
    let mut fallback_steps = Vec::new();
    let mut final_state: Option<Tensor> = None;

    for step in 1..=cfg.max_iters {
        let fz = match map(&z) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                prog.fail_all(step);
                break;
            }
            Err(e) => return Err(e),
        };
        check_shape(z0, &fz)?;
        let mut row_res = prog.last.clone();
        let mut fell_back = false;
        let mut accepted = z.clone();
        {
            let zd = z.data_mut();
            let ad = accepted.data_mut();
            for i in 0..batch {
                if !prog.active(i) {
                    continue;
                }
                let f_i = fz.row(i);
                let z_i = &zd[i * n..(i + 1) * n];
                let r = diff_norm(f_i, z_i);
                row_res[i] = r;
                if blown_up(f_i) {
                    prog.status[i] = ExampleStatus::Diverged { step };
                    continue;
                }
                if cfg.tol > 0.0 && r <= cfg.tol {
                    prog.status[i] = ExampleStatus::Converged { step };
                    ad[i * n..(i + 1) * n].copy_from_slice(f_i);
                    zd[i * n..(i + 1) * n].copy_from_slice(f_i);
                    continue;
                }
                let g: Vec<f64> = f_i.iter().zip(z_i).map(|(f, z)| f - z).collect();
                let h = &mut hist[i];
                if h.len() == cfg.memory {
                    h.pop_front();
                }
                h.push_back((f_i.to_vec(), g));
                let next = match mix(h, cfg.ridge) {
                    Some(v) => v,
                    None => {
                        fell_back = true;
                        f_i.to_vec()
                    }
                };
                if blown_up(&next) {
                    prog.status[i] = ExampleStatus::Diverged { step };
                    continue;
                }
                zd[i * n..(i + 1) * n].copy_from_slice(&next);
            }
        }
        if fell_back {
            fallback_steps.push(step);
        }
        prog.last = row_res.clone();
        if !prog.any_active() {
            // Converged examples report f(z) at the accepted iterate.
            prog.end_step(row_res, &accepted);
            final_state = Some(accepted);
            break;
        }
        prog.end_step(row_res, &z);
    }
    Ok(prog.finish(final_state.unwrap_or(z), fallback_steps))
}

/// Solves the constrained least-squares mixing problem. `None` when the
/// regularized Gram system is singular or produces non-finite weights.
fn mix(hist: &VecDeque<(Vec<f64>, Vec<f64>)>, ridge: f64) -> Option<Vec<f64>> {
    let m = hist.len();
    if m == 1 {
        return Some(hist[0].0.clone());
    }
    let mut gram = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let d: f64 = hist[a].1.iter().zip(&hist[b].1).map(|(x, y)| x * y).sum();
            gram[a * m + b] = d;
            gram[b * m + a] = d;
        }
    }
    let scale = (0..m).map(|a| gram[a * m + a]).sum::<f64>() / m as f64;
    for a in 0..m {
        gram[a * m + a] += ridge * scale;
    }
    let w = solve_dense(gram, vec![1.0; m], m)?;
    let s: f64 = w.iter().sum();
    if !s.is_finite() || s.abs() < f64::MIN_POSITIVE {
        return None;
    }
    let alpha: Vec<f64> = w.iter().map(|v| v / s).collect();
    if alpha.iter().any(|a| !a.is_finite()) {
        return None;
    }
    let len = hist[0].0.len();
    let mut out = vec![0.0; len];
    for (a, (f, _)) in alpha.iter().zip(hist) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += a * v;
        }
    }
    Some(out)
}

/// Gaussian elimination with partial pivoting on a small dense system.
pub(crate) fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() <= scale * 1e-14 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_solve_matches_hand_solution() {
        // [2 1; 1 3] x = [3; 5] -> x = [0.8, 1.4]
        let x = solve_dense(vec![2.0, 1.0, 1.0, 3.0], vec![3.0, 5.0], 2).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn dense_solve_detects_singularity() {
        assert!(solve_dense(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 1.0], 2).is_none());
        assert!(solve_dense(vec![0.0; 4], vec![1.0, 1.0], 2).is_none());
    }

    #[test]
    fn singular_mixing_falls_back() {
        // Two identical residuals and no ridge: the Gram matrix is singular.
        let mut h = VecDeque::new();
        h.push_back((vec![1.0, 0.0], vec![1.0, 1.0]));
        h.push_back((vec![2.0, 0.0], vec![1.0, 1.0]));
        assert!(mix(&h, 0.0).is_none());
        assert!(mix(&h, 1e-8).is_some());
    }
}
