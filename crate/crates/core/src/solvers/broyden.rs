use crate::error::Result;
use crate::solvers::{blown_up, check_shape, norm, ExampleStatus, Progress, SolverConfig, SolverTrace};
use crate::tensor::Tensor;

/// Inverse-Jacobian estimate `H = -I + sum_k u_k v_k^T` for `g(z) = f(z) - z`.
struct LowRankInverse {
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
}

impl LowRankInverse {
    fn new() -> Self {
        Self {
            us: Vec::new(),
            vs: Vec::new(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(u).for_each(|(o, ui)| *o += c * ui);
        }
        out
    }

    fn apply_t(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(v).for_each(|(o, vi)| *o += c * vi);
        }
        out
    }

    /// "Good" Broyden update via Sherman-Morrison:
    /// `H += (dz - H dg) (dz^T H) / (dz^T H dg)`.
    fn update(&mut self, dz: &[f64], dg: &[f64], restart: usize) {
        if self.us.len() >= restart {
            self.us.clear();
            self.vs.clear();
        }
        let h_dg = self.apply(dg);
        let denom: f64 = dz.iter().zip(&h_dg).map(|(a, b)| a * b).sum();
        if !denom.is_finite() || denom.abs() < 1e-300 {
            return;
        }
        let u: Vec<f64> = dz.iter().zip(&h_dg).map(|(a, b)| (a - b) / denom).collect();
        let v = self.apply_t(dz);
        if u.iter().chain(&v).all(|x| x.is_finite()) {
            self.us.push(u);
            self.vs.push(v);
        }
    }
}

/// Broyden's method on `g(z) = f(x, z) - z` starting from `H = -I`.
///
/// The first step is therefore a plain iteration. The low-rank estimate is
/// reset after `cfg.broyden_restart` updates.
pub fn broyden_solve<F>(mut map: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverTrace>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let batch = z0.shape()[0];
    let n = z0.row_len();
    let mut z = z0.clone();
    let mut prog = Progress::new(batch, z0, cfg.record_trace);
    let mut inv: Vec<LowRankInverse> = (0..batch).map(|_| LowRankInverse::new()).collect();
    let mut prev: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; batch];
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
        let mut accepted = z.clone();
        {
            let zd = z.data_mut();
            let ad = accepted.data_mut();
            for i in 0..batch {
                if !prog.active(i) {
                    continue;
                }
                let z_i = zd[i * n..(i + 1) * n].to_vec();
                let f_i = fz.row(i);
                let g: Vec<f64> = f_i.iter().zip(&z_i).map(|(f, z)| f - z).collect();
                let r = norm(&g);
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
                if let Some((pz, pg)) = prev[i].take() {
                    let dz: Vec<f64> = z_i.iter().zip(&pz).map(|(a, b)| a - b).collect();
                    let dg: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
                    inv[i].update(&dz, &dg, cfg.broyden_restart);
                }
                let dir = inv[i].apply(&g);
                let next: Vec<f64> = z_i.iter().zip(&dir).map(|(a, d)| a - d).collect();
                if blown_up(&next) {
                    prog.status[i] = ExampleStatus::Diverged { step };
                    continue;
                }
                zd[i * n..(i + 1) * n].copy_from_slice(&next);
                prev[i] = Some((z_i, g));
            }
        }
        prog.last = row_res.clone();
        if !prog.any_active() {
            prog.end_step(row_res, &accepted);
            final_state = Some(accepted);
            break;
        }
        prog.end_step(row_res, &z);
    }
    Ok(prog.finish(final_state.unwrap_or(z), Vec::new()))
}
