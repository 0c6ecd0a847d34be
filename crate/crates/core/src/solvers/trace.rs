use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ExampleStatus {
    Running,
    Converged { step: usize },
    BudgetExhausted,
    Diverged { step: usize },
}

impl ExampleStatus {
    pub fn diverged(&self) -> bool {
        matches!(self, ExampleStatus::Diverged { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    BudgetExhausted,
    Diverged,
}

/// How per-example residuals are reduced for export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    PerExample,
    Mean,
    Max,
}

/// Result of one fixed-point solve over a batch.
///
/// `residuals[t][i]` is `|f(x, z) - z|_2` for example `i` at step `t + 1`.
/// Examples that stopped early repeat their last residual so every row has
/// one entry per example.
#[derive(Clone, Debug)]
pub struct SolverTrace {
    pub residuals: Vec<Vec<f64>>,
    /// `z_0, z_1, ...` when recording was requested.
    pub iterates: Option<Vec<Tensor>>,
    pub status: Vec<ExampleStatus>,
    pub termination: Termination,
    pub final_state: Tensor,
    /// Steps at which Anderson mixing fell back to a plain iteration.
    pub fallback_steps: Vec<usize>,
}

impl SolverTrace {
    pub(crate) fn new(
        residuals: Vec<Vec<f64>>,
        iterates: Option<Vec<Tensor>>,
        status: Vec<ExampleStatus>,
        final_state: Tensor,
        fallback_steps: Vec<usize>,
    ) -> Self {
        let termination = if status.iter().any(ExampleStatus::diverged) {
            Termination::Diverged
        } else if status
            .iter()
            .all(|s| matches!(s, ExampleStatus::Converged { .. }))
        {
            Termination::Converged
        } else {
            Termination::BudgetExhausted
        };
        Self {
            residuals,
            iterates,
            status,
            termination,
            final_state,
            fallback_steps,
        }
    }

    pub fn steps(&self) -> usize {
        self.residuals.len()
    }

    pub fn batch(&self) -> usize {
        self.status.len()
    }

    /// Residual at the last performed step, per example.
    pub fn final_residuals(&self) -> Vec<f64> {
        self.residuals.last().cloned().unwrap_or_default()
    }

    pub fn diverged(&self, example: usize) -> bool {
        self.status[example].diverged()
    }

    pub fn diverged_fraction(&self) -> f64 {
        self.status.iter().filter(|s| s.diverged()).count() as f64 / self.batch() as f64
    }

    /// Per-step residual series under a reduction. `PerExample` yields one
    /// series per example; the others yield a single series.
    pub fn residual_series(&self, reduction: Reduction) -> Vec<Vec<f64>> {
        match reduction {
            Reduction::PerExample => (0..self.batch())
                .map(|i| self.residuals.iter().map(|row| row[i]).collect())
                .collect(),
            Reduction::Mean => vec![self
                .residuals
                .iter()
                .map(|row| row.iter().sum::<f64>() / row.len() as f64)
                .collect()],
            Reduction::Max => vec![self
                .residuals
                .iter()
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()],
        }
    }

    /// One CSV row per `(example, step)`: `example,step,residual`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["example", "step", "residual"])?;
        for (t, row) in self.residuals.iter().enumerate() {
            for (i, r) in row.iter().enumerate() {
                w.write_record([i.to_string(), (t + 1).to_string(), format!("{r:e}")])?;
            }
        }
        w.flush().map_err(|e| crate::error::Error::io("trace csv", e))?;
        Ok(())
    }

    /// Batch-reduced CSV: `step,residual`.
    pub fn write_reduced_csv<W: Write>(&self, out: W, reduction: Reduction) -> Result<()> {
        let series = match reduction {
            Reduction::PerExample => return self.write_csv(out),
            r => self.residual_series(r).remove(0),
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "residual"])?;
        for (t, r) in series.iter().enumerate() {
            w.write_record([(t + 1).to_string(), format!("{r:e}")])?;
        }
        w.flush().map_err(|e| crate::error::Error::io("trace csv", e))?;
        Ok(())
    }
}
