use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cells::{read_out, CellParams, Model};
use crate::error::{Error, Result};
use crate::harness::config::{EvalGrid, ExperimentConfig};
use crate::harness::data::{split_set, TaskBatch};
use crate::metrics::{aa_score_from, AaOptions, AaReport, KernelConfig, AA_CSV_HEADER};
use crate::solvers::{solve_model, SolverConfig};
use crate::tasks::{bit_accuracy, per_example_mse, strings_correct};
use crate::tensor::Tensor;

/// Examples solved together during evaluation. AA pairings rotate within a
/// chunk.
pub const EVAL_CHUNK: usize = 100;

/// One cell of the evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub tag: String,
    pub split: String,
    pub budget: usize,
    pub solver: String,
    pub bit_accuracy: Option<f64>,
    pub string_accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub aa_mean: Option<f64>,
    pub aa_mean_unflagged: Option<f64>,
    pub aa_flagged_fraction: Option<f64>,
    pub diverged_fraction: f64,
    pub residual_mean: f64,
    pub residual_max: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}

/// Task outcome of a forward solve.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub output: Tensor,
    /// Per example: whole string right (prefix sum); `None` for inversion.
    pub correct: Vec<Option<bool>>,
    pub bit_accuracy: Option<f64>,
    pub mse: Option<Vec<f64>>,
}

pub fn score_state(params: &CellParams, batch: &TaskBatch, z: &Tensor) -> Result<Prediction> {
    let out = read_out(params, z)?;
    Ok(match batch {
        TaskBatch::PrefixSum(b) => Prediction {
            correct: strings_correct(&out, &b.labels)?.into_iter().map(Some).collect(),
            bit_accuracy: Some(bit_accuracy(&out, &b.labels)?),
            mse: None,
            output: out,
        },
        TaskBatch::Inversion(b) => Prediction {
            correct: vec![None; b.count()],
            bit_accuracy: None,
            mse: Some(per_example_mse(&out, &b.target)?),
            output: out,
        },
    })
}

/// Results for one `(split, budget)` pair.
#[derive(Clone, Debug)]
pub struct CellEval {
    pub row: MetricsRow,
    pub aa: Option<Vec<AaReport>>,
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s..(s + EVAL_CHUNK).min(n)).collect())
        .collect()
}

/// Accuracy or MSE, AA and solver health of one split at one budget.
pub fn evaluate_cell(
    params: &CellParams,
    data: &TaskBatch,
    solver: &SolverConfig,
    aa: Option<&AaOptions>,
) -> Result<(MetricsRow, Option<Vec<AaReport>>)> {
    let mut correct = Vec::new();
    let mut bits = 0.0;
    let mut mse = Vec::new();
    let mut residuals = Vec::new();
    let mut diverged = 0usize;
    let mut reports = Vec::new();
    for idx in chunks(data.count()) {
        let batch = data.select(&idx);
        let x = batch.inputs();
        let z0 = Tensor::zeros(&params.state_shape(&x)?);
        let tr = solve_model(params, &x, &z0, solver)?;
        let pred = score_state(params, &batch, &tr.final_state)?;
        bits += pred.bit_accuracy.unwrap_or(0.0) * idx.len() as f64;
        mse.extend(pred.mse.unwrap_or_default());
        residuals.extend(tr.final_residuals());
        diverged += (0..tr.batch()).filter(|&i| tr.diverged(i)).count();
        correct.extend(pred.correct.iter().copied());
        if let Some(opts) = aa {
            if idx.len() >= 2 {
                let mut rep = aa_score_from(params, &x, tr, solver, opts)?;
                rep.correct = pred.correct;
                reports.push(rep);
            }
        }
    }
    let n = data.count() as f64;
    let is_prefix = matches!(data, TaskBatch::PrefixSum(_));
    let finite: Vec<f64> = residuals.iter().copied().filter(|r| r.is_finite()).collect();
    let (aa_mean, aa_unflagged, aa_flagged) = if reports.is_empty() {
        (None, None, None)
    } else {
        let scores: Vec<f64> = reports.iter().flat_map(|r| r.scores.clone()).collect();
        let flags: Vec<bool> = reports.iter().flat_map(|r| r.flagged.clone()).collect();
        let kept: Vec<f64> = scores.iter().zip(&flags).filter(|(_, f)| !**f).map(|(s, _)| *s).collect();
        (
            Some(scores.iter().sum::<f64>() / scores.len() as f64),
            (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64),
            Some(flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64),
        )
    };
    let row = MetricsRow {
        run_id: String::new(),
        tag: String::new(),
        split: String::new(),
        budget: solver.max_iters,
        solver: solver.method.to_string(),
        bit_accuracy: is_prefix.then(|| bits / n),
        string_accuracy: is_prefix
            .then(|| correct.iter().filter(|c| **c == Some(true)).count() as f64 / n),
        mse: (!is_prefix).then(|| mse.iter().sum::<f64>() / n),
        aa_mean,
        aa_mean_unflagged: aa_unflagged,
        aa_flagged_fraction: aa_flagged,
        diverged_fraction: diverged as f64 / n,
        residual_mean: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
        residual_max: finite.iter().copied().fold(0.0, f64::max),
    };
    Ok((row, (!reports.is_empty()).then_some(reports)))
}

/// Every split at every budget of `grid`.
pub fn evaluate(
    params: &CellParams,
    cfg: &ExperimentConfig,
    grid: &EvalGrid,
    run_id: &str,
    tag: &str,
) -> Result<Vec<(String, CellEval)>> {
    let opts = AaOptions {
        repeats: grid.aa_repeats,
        kernel: KernelConfig::default(),
        ..AaOptions::default()
    };
    let mut out = Vec::new();
    for split in &grid.splits {
        let data = split_set(cfg, split)?;
        for &budget in &grid.budgets {
            let solver = grid.solver(budget);
            let (mut row, aa) = evaluate_cell(params, &data, &solver, grid.aa.then_some(&opts))?;
            row.run_id = run_id.to_string();
            row.tag = tag.to_string();
            row.split = split.clone();
            out.push((split.clone(), CellEval { row, aa }));
        }
    }
    Ok(out)
}

/// Writes the per-example AA rows of every evaluated cell as one CSV.
pub fn write_aa_csv<W: Write>(evals: &[(String, CellEval)], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(AA_CSV_HEADER)?;
    for (split, ev) in evals {
        let Some(reports) = &ev.aa else { continue };
        let mut first = 0;
        for rep in reports {
            rep.write_records(&mut w, split, first)?;
            first += rep.scores.len();
        }
    }
    w.flush().map_err(|e| Error::io("aa csv", e))?;
    Ok(())
}
