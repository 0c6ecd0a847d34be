use std::io::Write;

use rand::seq::index;
use serde::Serialize;

use crate::cells::{CellParams, Model, ParamGrads};
use crate::error::{Error, Result};
use crate::gradients::{grad_ift, grad_jacobian_free, grad_phantom, grad_truncated, Estimator, GradResult};
use crate::harness::checkpoint::{Checkpoint, RngState};
use crate::harness::config::{ExperimentConfig, Intervention};
use crate::harness::data::{streams, train_set, TaskBatch};
use crate::harness::interventions::{alignment_penalty, intervene_mixed_init, intervene_random_depth};
use crate::optimizers::{lr_schedule, AdamState};
use crate::rng::{derive_seed, seeded, Rng};
use crate::solvers::solve_model;
use crate::tensor::Tensor;

/// Fraction of skipped steps above which a run is unhealthy.
pub const UNHEALTHY_SKIP_FRACTION: f64 = 0.01;

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub penalty: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub depth: usize,
    /// Mean final forward residual (solver-based estimators only).
    pub residual: Option<f64>,
    pub skipped: bool,
    pub skipped_total: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainRow>,
    pub skipped: usize,
    pub unhealthy: bool,
    /// First error message of every skipped step, in order.
    pub skip_reasons: Vec<(usize, String)>,
}

pub fn write_train_csv<W: Write>(rows: &[TrainRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("train csv", e))?;
    Ok(())
}

struct StepOutput {
    loss: f64,
    penalty: Option<f64>,
    grads: ParamGrads,
    residual: Option<f64>,
}

fn add_into(acc: &mut ParamGrads, other: ParamGrads, scale: f64) -> Result<()> {
    for (name, g) in other {
        let g = g.scaled(scale);
        match acc.get_mut(&name) {
            Some(a) => a.accumulate(&g)?,
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok(())
}

fn forward_backward(
    cfg: &ExperimentConfig,
    params: &CellParams,
    batch: &TaskBatch,
    rng: &mut Rng,
    depth: usize,
) -> Result<StepOutput> {
    let x = batch.noisy_inputs(cfg.data.noise_scale, rng);
    let shape = params.state_shape(&x)?;
    let z0 = match cfg.intervention {
        Intervention::MixedInit => intervene_mixed_init(&shape, rng),
        _ => Tensor::zeros(&shape),
    };
    let loss = batch.loss();
    let mut solver = cfg.train_solver.clone();
    solver.max_iters = depth;
    let (res, residual): (GradResult, Option<f64>) = match cfg.grad.estimator {
        Estimator::UnrolledBp => (grad_truncated(params, &x, &z0, depth, 1.0, &*loss)?, None),
        Estimator::TruncatedBp => (
            grad_truncated(params, &x, &z0, depth, cfg.grad.keep_fraction, &*loss)?,
            None,
        ),
        e => {
            let tr = solve_model(params, &x, &z0, &solver)?;
            let r = tr.final_residuals();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let z = &tr.final_state;
            let res = match e {
                Estimator::Ift => grad_ift(params, &x, z, &*loss, &cfg.grad)?,
                Estimator::JacobianFree => grad_jacobian_free(params, &x, z, &*loss)?,
                _ => grad_phantom(
                    params,
                    &x,
                    z,
                    &*loss,
                    cfg.grad.phantom_lambda,
                    cfg.grad.phantom_steps,
                )?,
            };
            (res, Some(mean))
        }
    };
    let mut grads = res.grads;
    let mut penalty = None;
    if let Intervention::AlignmentPenalty { k, weight } = cfg.intervention {
        let p = alignment_penalty(params, &x, k, &solver, &cfg.grad, rng)?;
        if !p.value.is_finite() {
            return Err(Error::Numeric(format!("non-finite alignment penalty {}", p.value)));
        }
        add_into(&mut grads, p.grads, weight)?;
        penalty = Some(p.value);
    }
    Ok(StepOutput {
        loss: res.loss,
        penalty,
        grads,
        residual,
    })
}

/// Trains from scratch. `on_checkpoint` receives every periodic checkpoint.
pub fn train(
    cfg: &ExperimentConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = train_set(cfg)?;
    let mut params = CellParams::init(cfg.cell.clone(), &mut seeded(derive_seed(cfg.seed, streams::INIT)))?;
    let mut adam = AdamState::new(cfg.optimizer.adam.clone(), params.tensors())?;
    let mut rng = seeded(derive_seed(cfg.seed, streams::TRAIN_LOOP));
    let mut log = Vec::new();
    let mut skipped = 0;
    let mut skip_reasons = Vec::new();

    for step in 0..cfg.steps {
        let idx = index::sample(&mut rng, data.count(), cfg.batch).into_vec();
        let batch = data.select(&idx);
        let depth = match cfg.intervention {
            Intervention::RandomizedDepth { min, max } => intervene_random_depth(min, max, &mut rng),
            _ => cfg.train_solver.max_iters,
        };
        let lr = lr_schedule(step, cfg.steps, cfg.optimizer.adam.lr, cfg.optimizer.schedule);
        let result = forward_backward(cfg, &params, &batch, &mut rng, depth).and_then(|out| {
            let info = adam.step(params.tensors_mut(), &out.grads, lr)?;
            Ok((out, info))
        });
        let row = match result {
            Ok((out, info)) => TrainRow {
                step,
                loss: out.loss,
                penalty: out.penalty,
                lr,
                grad_norm: info.grad_norm,
                clipped: info.clipped,
                depth,
                residual: out.residual,
                skipped: false,
                skipped_total: skipped,
            },
            Err(e) if e.is_numeric() => {
                skipped += 1;
                skip_reasons.push((step, e.to_string()));
                TrainRow {
                    step,
                    loss: f64::NAN,
                    penalty: None,
                    lr,
                    grad_norm: f64::NAN,
                    clipped: false,
                    depth,
                    residual: None,
                    skipped: true,
                    skipped_total: skipped,
                }
            }
            Err(e) => return Err(e),
        };
        if row.skipped || step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(row);
        }
        if let Some(every) = cfg.checkpoint_every {
            if (step + 1) % every == 0 && step + 1 < cfg.steps {
                on_checkpoint(&Checkpoint {
                    config: cfg.clone(),
                    params: params.clone(),
                    adam: Some(adam.clone()),
                    step: step as u64 + 1,
                    rng: Some(RngState::capture(&rng)),
                })?;
            }
        }
    }
    let unhealthy = skipped as f64 > UNHEALTHY_SKIP_FRACTION * cfg.steps as f64;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params,
            adam: Some(adam),
            step: cfg.steps as u64,
            rng: Some(RngState::capture(&rng)),
        },
        log,
        skipped,
        unhealthy,
        skip_reasons,
    })
}
