use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{evaluate, write_aa_csv, write_metrics_csv, MetricsRow};
use crate::harness::rundir::RunDir;
use crate::harness::train::{train, write_train_csv};

pub const CHECKPOINT_FILE: &str = "ckpt.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_sha256: String,
    pub steps: usize,
    pub skipped: usize,
    pub unhealthy: bool,
    pub final_loss: Option<f64>,
    pub rows: Vec<MetricsRow>,
    /// Wall-clock seconds; kept out of the CSVs so they stay reproducible.
    pub wall_secs: f64,
}

/// Train, checkpoint, evaluate the configured grid and close the directory.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &RunDir, run_id: &str) -> Result<RunSummary> {
    let start = Instant::now();
    cfg.validate()?;
    dir.write_json("config.json", cfg)?;
    let outcome = train(cfg, |ck| {
        save_checkpoint(&dir.file(&format!("ckpt_step{}.bin", ck.step)), ck)
    })?;
    save_checkpoint(&dir.file(CHECKPOINT_FILE), &outcome.checkpoint)?;
    dir.write_with("train.csv", |w| write_train_csv(&outcome.log, w))?;
    let evals = evaluate(&outcome.checkpoint.params, cfg, &cfg.eval, run_id, "final")?;
    let rows: Vec<MetricsRow> = evals.iter().map(|(_, e)| e.row.clone()).collect();
    dir.write_with("metrics.csv", |w| write_metrics_csv(&rows, w, true))?;
    dir.write_with("aa.csv", |w| write_aa_csv(&evals, w))?;
    let summary = RunSummary {
        run_id: run_id.to_string(),
        config_sha256: cfg.sha256(),
        steps: cfg.steps,
        skipped: outcome.skipped,
        unhealthy: outcome.unhealthy,
        final_loss: outcome.log.iter().rev().find(|r| !r.skipped).map(|r| r.loss),
        rows,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    dir.write_json("summary.json", &summary)?;
    if !outcome.skip_reasons.is_empty() {
        dir.write_json("skipped.json", &outcome.skip_reasons)?;
    }
    dir.finish(if outcome.unhealthy { "unhealthy" } else { "ok" })?;
    Ok(summary)
}
