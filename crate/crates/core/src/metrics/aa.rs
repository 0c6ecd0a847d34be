use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cells::Model;
use crate::error::{Error, Result};
use crate::metrics::KernelConfig;
use crate::solvers::{solve_model, SolverConfig, SolverTrace};
use crate::tensor::Tensor;

/// How fixed points are swapped between examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Example `i` restarts from the fixed point of example `(i + k) % B`.
    Rotate(usize),
    /// Example `i` restarts from the fixed point of `perm[i]`.
    Explicit(Vec<usize>),
}

impl Default for Pairing {
    fn default() -> Self {
        Pairing::Rotate(1)
    }
}

impl Pairing {
    /// Source index for every example; must be a derangement.
    pub fn permutation(&self, batch: usize) -> Result<Vec<usize>> {
        let perm: Vec<usize> = match self {
            Pairing::Rotate(k) => (0..batch).map(|i| (i + k) % batch).collect(),
            Pairing::Explicit(p) => p.clone(),
        };
        let mut seen = vec![false; batch];
        let ok = perm.len() == batch
            && perm.iter().enumerate().all(|(i, &j)| {
                let fresh = j < batch && !seen[j] && j != i;
                if fresh {
                    seen[j] = true;
                }
                fresh
            });
        if !ok {
            return Err(Error::Config(format!(
                "pairing {perm:?} is not a derangement of {batch} examples"
            )));
        }
        Ok(perm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AaOptions {
    #[serde(default)]
    pub pairing: Pairing,
    /// Swapped re-solves per example; repeat `r` rotates the pairing by
    /// `r` more positions. Scores are averaged over repeats.
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub kernel: KernelConfig,
}

fn one() -> usize {
    1
}

impl Default for AaOptions {
    fn default() -> Self {
        Self {
            pairing: Pairing::default(),
            repeats: 1,
            kernel: KernelConfig::default(),
        }
    }
}

/// Per-example asymptotic alignment.
#[derive(Clone, Debug)]
pub struct AaReport {
    /// Score per example; flagged examples hold -1.
    pub scores: Vec<f64>,
    /// Divergence or an undefined score (zero-norm fixed point).
    pub flagged: Vec<bool>,
    /// Filled in by the caller when the task defines correctness.
    pub correct: Vec<Option<bool>>,
    /// Fixed points from the zero initialization.
    pub canonical: Tensor,
    pub canonical_trace: SolverTrace,
    pub solver: SolverConfig,
    pub options: AaOptions,
}

impl AaReport {
    /// Mean over every example, flagged ones counted at -1.
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Mean over unflagged examples; `None` when all are flagged.
    pub fn mean_unflagged(&self) -> Option<f64> {
        let kept: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.flagged)
            .filter(|(_, f)| !**f)
            .map(|(s, _)| *s)
            .collect();
        (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
    }

    pub fn flagged_fraction(&self) -> f64 {
        self.flagged.iter().filter(|f| **f).count() as f64 / self.flagged.len() as f64
    }

    /// Columns `example_id,split,aa,correct,diverged,solver,budget`.
    pub fn write_csv<W: Write>(&self, out: W, split: &str, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record(AA_CSV_HEADER)?;
        }
        self.write_records(&mut w, split, 0)?;
        w.flush().map_err(|e| Error::io("aa csv", e))?;
        Ok(())
    }

    /// Appends one row per example, numbering from `first_id`.
    pub fn write_records<W: Write>(
        &self,
        w: &mut csv::Writer<W>,
        split: &str,
        first_id: usize,
    ) -> Result<()> {
        for i in 0..self.scores.len() {
            let correct = match self.correct[i] {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            w.write_record([
                (first_id + i).to_string(),
                split.to_string(),
                format!("{}", self.scores[i]),
                correct.to_string(),
                u8::from(self.flagged[i]).to_string(),
                self.solver.method.to_string(),
                self.solver.max_iters.to_string(),
            ])?;
        }
        Ok(())
    }
}

pub const AA_CSV_HEADER: [&str; 7] = ["example_id", "split", "aa", "correct", "diverged", "solver", "budget"];

/// Asymptotic alignment: solve from zero, re-solve every example from
/// another example's fixed point, and compare the two fixed points.
pub fn aa_score<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    solver: &SolverConfig,
    options: &AaOptions,
) -> Result<AaReport> {
    options.kernel.validate()?;
    if options.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let batch = x.shape()[0];
    if batch < 2 {
        return Err(Error::Config("AA score needs at least two examples".into()));
    }
    let z0 = Tensor::zeros(&model.state_shape(x)?);
    let first = solve_model(model, x, &z0, solver)?;
    aa_score_from(model, x, first, solver, options)
}

/// [`aa_score`] reusing an existing solve from the zero state.
pub fn aa_score_from<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    first: SolverTrace,
    solver: &SolverConfig,
    options: &AaOptions,
) -> Result<AaReport> {
    options.kernel.validate()?;
    if options.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let batch = x.shape()[0];
    if batch < 2 || first.batch() != batch {
        return Err(Error::Config(format!(
            "AA score needs at least two examples and a matching solve, got {batch} and {}",
            first.batch()
        )));
    }
    let base = options.pairing.permutation(batch)?;
    let canonical = first.final_state.clone();

    let mut sums = vec![0.0; batch];
    let mut flagged: Vec<bool> = (0..batch).map(|i| first.diverged(i)).collect();
    for r in 0..options.repeats {
        let perm: Vec<usize> = base.iter().map(|&j| (j + r) % batch).collect();
        // Shifting a derangement can create fixed points; skip those slots.
        let swapped = canonical.select_rows(&perm);
        let second = solve_model(model, x, &swapped, solver)?;
        for i in 0..batch {
            if perm[i] == i {
                continue;
            }
            let s = options
                .kernel
                .score(second.final_state.row(i), canonical.row(i));
            match s {
                Some(v) if !second.diverged(i) => sums[i] += v,
                _ => flagged[i] = true,
            }
        }
    }
    let counts: Vec<usize> = (0..batch)
        .map(|i| (0..options.repeats).filter(|r| (base[i] + r) % batch != i).count())
        .collect();
    let scores = (0..batch)
        .map(|i| {
            if flagged[i] || counts[i] == 0 {
                -1.0
            } else {
                sums[i] / counts[i] as f64
            }
        })
        .collect();
    for i in 0..batch {
        if counts[i] == 0 {
            flagged[i] = true;
        }
    }
    Ok(AaReport {
        scores,
        flagged,
        correct: vec![None; batch],
        canonical,
        canonical_trace: first,
        solver: solver.clone(),
        options: options.clone(),
    })
}
