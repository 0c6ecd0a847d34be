use crate::error::Result;
use crate::solvers::{blown_up, check_shape, diff_norm, ExampleStatus, Progress, SolverConfig, SolverTrace};
use crate::tensor::Tensor;

/// Plain iteration `z_{t+1} = f(x, z_t)`.
///
/// With `tol = 0` this runs exactly `max_iters` applications, which is the
/// weight-tied unrolled network of that depth.
pub fn fixed_point_iterate<F>(mut map: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverTrace>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let batch = z0.shape()[0];
    let n = z0.row_len();
    let mut z = z0.clone();
    let mut prog = Progress::new(batch, z0, cfg.record_trace);

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
        let zd = z.data_mut();
        for i in 0..batch {
            if !prog.active(i) {
                continue;
            }
            let f_i = fz.row(i);
            let r = diff_norm(f_i, &zd[i * n..(i + 1) * n]);
            row_res[i] = r;
            if blown_up(f_i) {
                prog.status[i] = ExampleStatus::Diverged { step };
                continue;
            }
            zd[i * n..(i + 1) * n].copy_from_slice(f_i);
            if cfg.tol > 0.0 && r <= cfg.tol {
                prog.status[i] = ExampleStatus::Converged { step };
            }
        }
        prog.last = row_res.clone();
        prog.end_step(row_res, &z);
        if !prog.any_active() {
            break;
        }
    }
    Ok(prog.finish(z, Vec::new()))
}
