//! Fixed-point solvers `FIX(x, z0)`.
//!
//! All solvers treat axis 0 of the state as the batch axis and run one
//! independent solve per example: each example keeps its own history, stops
//! on its own residual and is flagged divergent on its own. The map itself is
//! always evaluated on the whole batch; stopped examples are frozen.

mod anderson;
mod broyden;
mod naive;
mod trace;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use anderson::anderson_solve;
pub use broyden::broyden_solve;
pub use naive::fixed_point_iterate;
pub use trace::{ExampleStatus, Reduction, SolverTrace, Termination};

use crate::cells::{CellMap, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Iterates whose L2 norm exceeds this are treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Naive,
    Anderson,
    Broyden,
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMethod::Naive => "naive",
            SolverMethod::Anderson => "anderson",
            SolverMethod::Broyden => "broyden",
        })
    }
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" | "fixed_point" | "unroll" => Ok(SolverMethod::Naive),
            "anderson" => Ok(SolverMethod::Anderson),
            "broyden" => Ok(SolverMethod::Broyden),
            other => Err(Error::Config(format!("unknown solver method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub max_iters: usize,
    /// Residual threshold for early stopping; `0` disables it.
    #[serde(default)]
    pub tol: f64,
    /// Anderson history length.
    #[serde(default = "default_memory")]
    pub memory: usize,
    /// Ridge added to the Anderson normal equations.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Broyden low-rank updates kept before resetting to `-I`.
    #[serde(default = "default_restart")]
    pub broyden_restart: usize,
    #[serde(default)]
    pub record_trace: bool,
}

fn default_memory() -> usize {
    3
}
fn default_ridge() -> f64 {
    1e-8
}
fn default_restart() -> usize {
    40
}

impl SolverConfig {
    pub fn new(method: SolverMethod, max_iters: usize) -> Self {
        Self {
            method,
            max_iters,
            tol: 0.0,
            memory: default_memory(),
            ridge: default_ridge(),
            broyden_restart: default_restart(),
            record_trace: false,
        }
    }

    pub fn naive(max_iters: usize) -> Self {
        Self::new(SolverMethod::Naive, max_iters)
    }

    pub fn anderson(max_iters: usize) -> Self {
        Self::new(SolverMethod::Anderson, max_iters)
    }

    pub fn broyden(max_iters: usize) -> Self {
        Self::new(SolverMethod::Broyden, max_iters)
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_memory(mut self, memory: usize) -> Self {
        self.memory = memory;
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol must be >= 0, got {}", self.tol)));
        }
        if self.method == SolverMethod::Anderson {
            if self.memory == 0 || self.memory > self.max_iters {
                return Err(Error::Config(format!(
                    "anderson memory {} must lie in 1..={}",
                    self.memory, self.max_iters
                )));
            }
            if !(self.ridge >= 0.0) {
                return Err(Error::Config(format!("ridge must be >= 0, got {}", self.ridge)));
            }
        }
        if self.method == SolverMethod::Broyden && self.broyden_restart == 0 {
            return Err(Error::Config("broyden_restart must be positive".into()));
        }
        Ok(())
    }
}

/// Dispatches on `cfg.method`.
pub fn solve<F>(map: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverTrace>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    match cfg.method {
        SolverMethod::Naive => fixed_point_iterate(map, z0, cfg),
        SolverMethod::Anderson => anderson_solve(map, z0, cfg),
        SolverMethod::Broyden => broyden_solve(map, z0, cfg),
    }
}

/// Solves `z = f(x, z)` for a model on a raw input batch.
pub fn solve_model<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    z0: &Tensor,
    cfg: &SolverConfig,
) -> Result<SolverTrace> {
    let map = CellMap::new(model, x)?;
    solve(|z| map.apply(z), z0, cfg)
}

/// Per-example bookkeeping shared by the three solvers.
pub(crate) struct Progress {
    pub status: Vec<ExampleStatus>,
    pub residuals: Vec<Vec<f64>>,
    pub last: Vec<f64>,
    pub iterates: Option<Vec<Tensor>>,
}

impl Progress {
    pub fn new(batch: usize, z0: &Tensor, record: bool) -> Self {
        Self {
            status: vec![ExampleStatus::Running; batch],
            residuals: Vec::new(),
            last: vec![f64::NAN; batch],
            iterates: record.then(|| vec![z0.clone()]),
        }
    }

    pub fn active(&self, i: usize) -> bool {
        self.status[i] == ExampleStatus::Running
    }

    pub fn any_active(&self) -> bool {
        self.status.contains(&ExampleStatus::Running)
    }

    /// Marks every still-running example divergent (map failure).
    pub fn fail_all(&mut self, step: usize) {
        for s in &mut self.status {
            if *s == ExampleStatus::Running {
                *s = ExampleStatus::Diverged { step };
            }
        }
    }

    pub fn end_step(&mut self, step_res: Vec<f64>, z: &Tensor) {
        self.residuals.push(step_res);
        if let Some(it) = self.iterates.as_mut() {
            it.push(z.clone());
        }
    }

    pub fn finish(mut self, z: Tensor, fallback_steps: Vec<usize>) -> SolverTrace {
        for s in &mut self.status {
            if *s == ExampleStatus::Running {
                *s = ExampleStatus::BudgetExhausted;
            }
        }
        SolverTrace::new(self.residuals, self.iterates, self.status, z, fallback_steps)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// True when an iterate can no longer be trusted.
pub(crate) fn blown_up(v: &[f64]) -> bool {
    let n = norm(v);
    !n.is_finite() || n > DIVERGENCE_NORM
}

pub(crate) fn check_shape(z0: &Tensor, fz: &Tensor) -> Result<()> {
    if z0.shape() != fz.shape() {
        return Err(Error::dim(
            "solve",
            format!("map returned {:?} for state {:?}", fz.shape(), z0.shape()),
        ));
    }
    Ok(())
}
