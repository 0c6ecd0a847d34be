use std::io::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::cells::{CellMap, Model};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::solvers::{solve, ExampleStatus, SolverConfig, SolverTrace};
use crate::tensor::Tensor;

/// Per-step residuals of several solvers started from the same state.
#[derive(Clone, Debug)]
pub struct ResidualCurves {
    pub solvers: Vec<SolverConfig>,
    pub traces: Vec<SolverTrace>,
    /// `|z_a(t) - z_b(t)|_2` between the first two solvers for
    /// `t = 0..=budget`; empty with a single solver.
    pub distance: Vec<f64>,
    pub budget: usize,
}

fn iterate_at(trace: &SolverTrace, t: usize) -> &Tensor {
    let it = trace.iterates.as_ref().expect("recorded trace");
    &it[t.min(it.len() - 1)]
}

impl ResidualCurves {
    /// Batch-mean residual of solver `s` at step `t` (1-based), holding the
    /// last value after an early stop.
    pub fn residual(&self, s: usize, t: usize) -> f64 {
        let rows = &self.traces[s].residuals;
        if rows.is_empty() {
            return 0.0;
        }
        let row = &rows[(t - 1).min(rows.len() - 1)];
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// First step at which any example of solver `s` diverged.
    pub fn diverged_at(&self, s: usize) -> Option<usize> {
        self.traces[s]
            .status
            .iter()
            .filter_map(|st| match st {
                ExampleStatus::Diverged { step } => Some(*step),
                _ => None,
            })
            .min()
    }

    /// `step,solver,residual,diverged` rows followed by nothing else; the
    /// distance table goes through [`ResidualCurves::write_distance_csv`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "solver", "residual", "diverged"])?;
        for (s, cfg) in self.solvers.iter().enumerate() {
            let div = self.diverged_at(s);
            for t in 1..=self.budget {
                let flag = div.is_some_and(|d| t >= d);
                w.write_record([
                    t.to_string(),
                    cfg.method.to_string(),
                    format!("{:e}", self.residual(s, t)),
                    flag.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("residual csv", e))?;
        Ok(())
    }

    pub fn write_distance_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "distance"])?;
        for (t, d) in self.distance.iter().enumerate() {
            w.write_record([t.to_string(), format!("{d:e}")])?;
        }
        w.flush().map_err(|e| Error::io("distance csv", e))?;
        Ok(())
    }
}

/// Runs every solver on `map` from `z0` with iterate recording.
pub fn residual_curve<F>(mut map: F, z0: &Tensor, solvers: &[SolverConfig]) -> Result<ResidualCurves>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let Some(first) = solvers.first() else {
        return Err(Error::Config("residual curves need at least one solver".into()));
    };
    let budget = first.max_iters;
    if solvers.iter().any(|s| s.max_iters != budget) {
        return Err(Error::Config("residual curves need equal solver budgets".into()));
    }
    let mut traces = Vec::with_capacity(solvers.len());
    for cfg in solvers {
        let cfg = cfg.clone().recording();
        traces.push(solve(&mut map, z0, &cfg)?);
    }
    let distance = if traces.len() >= 2 {
        (0..=budget)
            .map(|t| {
                let (a, b) = (iterate_at(&traces[0], t), iterate_at(&traces[1], t));
                a.sub(b).map(|d| d.norm()).unwrap_or(f64::NAN)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(ResidualCurves {
        solvers: solvers.to_vec(),
        traces,
        distance,
        budget,
    })
}

/// [`residual_curve`] on a model's cell for one input batch.
pub fn residual_curve_model<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z0: &Tensor,
    solvers: &[SolverConfig],
) -> Result<ResidualCurves> {
    let map = CellMap::new(model, x)?;
    residual_curve(|z| map.apply(z), z0, solvers)
}

/// Hidden-state trajectories projected on two random orthonormal directions.
#[derive(Clone, Debug)]
pub struct Projection {
    pub directions: [Vec<f64>; 2],
    /// `trajectories[k][t]` is the `(u, v)` coordinate of init `k` after
    /// `t` steps.
    pub trajectories: Vec<Vec<(f64, f64)>>,
}

impl Projection {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trajectory_id", "step", "u", "v"])?;
        for (k, tr) in self.trajectories.iter().enumerate() {
            for (t, (u, v)) in tr.iter().enumerate() {
                w.write_record([k.to_string(), t.to_string(), format!("{u:e}"), format!("{v:e}")])?;
            }
        }
        w.flush().map_err(|e| Error::io("projection csv", e))?;
        Ok(())
    }
}

/// Two seeded Gaussian directions made orthonormal by Gram-Schmidt.
pub fn random_directions(dim: usize, seed: u64) -> Result<[Vec<f64>; 2]> {
    if dim < 2 {
        return Err(Error::Config(format!("cannot project a {dim}-dimensional state")));
    }
    let mut rng = seeded(seed);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut a = draw();
    normalize(&mut a);
    let mut b = draw();
    // Two passes keep the residual dot product at rounding level.
    for _ in 0..2 {
        let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= d * x);
    }
    normalize(&mut b);
    Ok([a, b])
}

/// Applies `map` `steps` times from each init and projects every state.
pub fn trajectory_projection<F>(
    mut map: F,
    inits: &[Tensor],
    steps: usize,
    seed: u64,
) -> Result<Projection>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if inits.len() < 2 {
        return Err(Error::Config("projection needs at least two inits".into()));
    }
    let dim = inits[0].numel();
    if inits.iter().any(|z| z.shape() != inits[0].shape()) {
        return Err(Error::Config("inits must share one shape".into()));
    }
    let directions = random_directions(dim, seed)?;
    let project = |z: &Tensor| {
        let d = z.data();
        let u = d.iter().zip(&directions[0]).map(|(x, y)| x * y).sum();
        let v = d.iter().zip(&directions[1]).map(|(x, y)| x * y).sum();
        (u, v)
    };
    let mut trajectories = Vec::with_capacity(inits.len());
    for z0 in inits {
        let mut z = z0.clone();
        let mut tr = vec![project(&z)];
        for _ in 0..steps {
            z = map(&z)?;
            tr.push(project(&z));
        }
        trajectories.push(tr);
    }
    Ok(Projection {
        directions,
        trajectories,
    })
}

/// [`trajectory_projection`] on a model's cell.
pub fn trajectory_projection_model<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    inits: &[Tensor],
    steps: usize,
    seed: u64,
) -> Result<Projection> {
    let map = CellMap::new(model, x)?;
    trajectory_projection(|z| map.apply(z), inits, steps, seed)
}
