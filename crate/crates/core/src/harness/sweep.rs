use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::harness::correlate::{correlate, spearman, TrendFit};
use crate::harness::rundir::RunDir;
use crate::harness::run::{run_experiment, RunSummary};
use crate::metrics::probit;

/// Runs per grid are capped to keep typos from launching huge sweeps.
pub const MAX_SWEEP_RUNS: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// JSON pointer into the config, e.g. `/cell/weight_norm`.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMetric {
    BitAccuracy,
    StringAccuracy,
    /// Mean squared error; summarized by Spearman correlation with AA.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendSpec {
    pub budget: usize,
    /// Splits averaged per run; all evaluated splits when absent.
    #[serde(default)]
    pub splits: Option<Vec<String>>,
    #[serde(default = "default_metric")]
    pub metric: TrendMetric,
}

fn default_metric() -> TrendMetric {
    TrendMetric::BitAccuracy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub schema_version: u32,
    /// A complete experiment config every run starts from.
    pub base: Value,
    #[serde(default)]
    pub axes: Vec<Axis>,
    /// Seeds crossed with the axes; the base seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub trend: TrendSpec,
}

/// One expanded run.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub run_id: String,
    /// `(path, value)` settings that distinguish this run.
    pub settings: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

fn set_pointer(root: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() || !path.starts_with('/') {
        return Err(Error::Config(format!("axis path {path:?} must start with '/'")));
    }
    let (parent, last) = path.rsplit_once('/').expect("starts with '/'");
    let last = last.replace("~1", "/").replace("~0", "~");
    let target = root
        .pointer_mut(parent)
        .ok_or_else(|| Error::Config(format!("axis path {path:?} has no parent in the base config")))?;
    match target {
        Value::Object(map) => {
            map.insert(last, value);
            Ok(())
        }
        _ => Err(Error::Config(format!("axis path {path:?} does not point into an object"))),
    }
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let grid: Self = serde_json::from_str(text)?;
        if grid.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "sweep schema_version {} is not supported (expected {SCHEMA_VERSION})",
                grid.schema_version
            )));
        }
        if !grid.base.is_object() {
            return Err(Error::Config("sweep base must be a config object".into()));
        }
        let mut runs: usize = grid.seeds.len().max(1);
        for a in &grid.axes {
            if a.values.is_empty() {
                return Err(Error::Config(format!("axis {} has no values", a.path)));
            }
            runs = runs
                .checked_mul(a.values.len())
                .filter(|n| *n <= MAX_SWEEP_RUNS)
                .ok_or_else(|| Error::Config(format!("grid exceeds {MAX_SWEEP_RUNS} runs")))?;
        }
        if grid.trend.budget == 0 {
            return Err(Error::Config("trend budget must be positive".into()));
        }
        Ok(grid)
    }

    /// Cartesian product of axes (last axis fastest) times seeds, each
    /// validated as a full config.
    pub fn expand(&self) -> Result<Vec<SweepRun>> {
        let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for a in &self.axes {
            let mut next = Vec::with_capacity(combos.len() * a.values.len());
            for c in &combos {
                for v in &a.values {
                    let mut c = c.clone();
                    c.push((a.path.clone(), v.clone()));
                    next.push(c);
                }
            }
            combos = next;
        }
        let seeds: Vec<Option<u64>> = if self.seeds.is_empty() {
            vec![None]
        } else {
            self.seeds.iter().copied().map(Some).collect()
        };
        let mut runs = Vec::new();
        for settings in &combos {
            for seed in &seeds {
                let mut v = self.base.clone();
                for (p, val) in settings {
                    set_pointer(&mut v, p, val.clone())?;
                }
                let mut settings = settings.clone();
                if let Some(s) = seed {
                    set_pointer(&mut v, "/seed", Value::from(*s))?;
                    settings.push(("/seed".into(), Value::from(*s)));
                }
                let config = ExperimentConfig::from_json(&v.to_string())?;
                if !config.eval.budgets.contains(&self.trend.budget) {
                    return Err(Error::Config(format!(
                        "trend budget {} is not in the eval budgets {:?}",
                        self.trend.budget, config.eval.budgets
                    )));
                }
                runs.push(SweepRun {
                    run_id: format!("run{:03}", runs.len()),
                    settings,
                    config,
                });
            }
        }
        Ok(runs)
    }
}

/// One scatter point of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendPoint {
    pub run_id: String,
    pub aa: f64,
    pub value: f64,
    pub probit_aa: f64,
    /// Probit of the value for accuracy metrics; the raw value for MSE.
    pub probit_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrendReport {
    pub metric: TrendMetric,
    pub budget: usize,
    pub points: Vec<TrendPoint>,
    pub fit: Option<TrendFit>,
    pub spearman: Option<f64>,
    /// Why the fit was refused, if it was.
    pub note: Option<String>,
}

/// Per-run mean AA and metric over the chosen splits at the trend budget.
pub fn trend_point(summary: &RunSummary, spec: &TrendSpec) -> Option<TrendPoint> {
    let rows: Vec<_> = summary
        .rows
        .iter()
        .filter(|r| r.budget == spec.budget)
        .filter(|r| spec.splits.as_ref().is_none_or(|s| s.contains(&r.split)))
        .collect();
    if rows.is_empty() {
        return None;
    }
    let mean = |f: &dyn Fn(&crate::harness::eval::MetricsRow) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = rows.iter().map(|r| f(r)).collect::<Option<_>>()?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    };
    let aa = mean(&|r| r.aa_mean)?;
    let value = match spec.metric {
        TrendMetric::BitAccuracy => mean(&|r| r.bit_accuracy)?,
        TrendMetric::StringAccuracy => mean(&|r| r.string_accuracy)?,
        TrendMetric::Mse => mean(&|r| r.mse)?,
    };
    Some(TrendPoint {
        run_id: summary.run_id.clone(),
        aa,
        value,
        probit_aa: probit(aa),
        probit_value: if spec.metric == TrendMetric::Mse { value } else { probit(value) },
    })
}

pub fn trend_report(summaries: &[RunSummary], spec: &TrendSpec) -> TrendReport {
    let points: Vec<TrendPoint> = summaries.iter().filter_map(|s| trend_point(s, spec)).collect();
    let (fit, spearman_r, note) = if spec.metric == TrendMetric::Mse {
        let aa: Vec<f64> = points.iter().map(|p| p.aa).collect();
        let v: Vec<f64> = points.iter().map(|p| p.value).collect();
        match spearman(&aa, &v) {
            Ok(r) => (None, Some(r), None),
            Err(e) => (None, None, Some(e.to_string())),
        }
    } else {
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.aa, p.value)).collect();
        match correlate(&xy) {
            Ok(f) => (Some(f), None, None),
            Err(e) => (None, None, Some(e.to_string())),
        }
    };
    TrendReport {
        metric: spec.metric,
        budget: spec.budget,
        points,
        fit,
        spearman: spearman_r,
        note,
    }
}

pub fn write_trend_csv<W: Write>(points: &[TrendPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    if points.is_empty() {
        w.write_record(["run_id", "aa", "value", "probit_aa", "probit_value"])?;
    }
    w.flush().map_err(|e| Error::io("trend csv", e))?;
    Ok(())
}

/// Runs every grid point under `out/runs/<run_id>`, reusing finished runs,
/// then writes `runs.json`, `correlation.csv` and `trend.json`.
pub fn run_sweep(grid: &SweepGrid, out: &Path) -> Result<(Vec<RunSummary>, TrendReport)> {
    let runs = grid.expand()?;
    let dir = RunDir::create(out)?;
    dir.write_json("grid.json", grid)?;
    let index: Vec<_> = runs
        .iter()
        .map(|r| serde_json::json!({"run_id": r.run_id, "settings": r.settings}))
        .collect();
    dir.write_json("runs.json", &index)?;
    let mut summaries = Vec::new();
    for r in &runs {
        let path = out.join("runs").join(&r.run_id);
        let reuse = RunDir::is_done(&path)
            .then(|| std::fs::read_to_string(path.join("summary.json")).ok())
            .flatten()
            .and_then(|t| serde_json::from_str::<RunSummary>(&t).ok())
            .filter(|s| s.config_sha256 == r.config.sha256());
        let summary = match reuse {
            Some(s) => s,
            None => {
                let rd = RunDir::create(&path)?;
                match run_experiment(&r.config, &rd, &r.run_id) {
                    Ok(s) => s,
                    Err(e) => {
                        rd.fail(&e.to_string())?;
                        return Err(e);
                    }
                }
            }
        };
        summaries.push(summary);
    }
    let report = trend_report(&summaries, &grid.trend);
    dir.write_with("correlation.csv", |w| write_trend_csv(&report.points, w))?;
    dir.write_json("trend.json", &report)?;
    let unhealthy = summaries.iter().any(|s| s.unhealthy);
    dir.finish(if unhealthy { "unhealthy" } else { "ok" })?;
    Ok((summaries, report))
}
