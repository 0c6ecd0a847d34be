use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Split};
use crate::rng::derive_seed;
use crate::tasks::{gen_inversion, gen_prefix_sum, prefix_sum_loss, InversionBatch, PrefixSumBatch, INVERSION_TRAIN_KAPPA};
use crate::tensor::Tensor;

/// Seed streams derived from the run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN_DATA: u64 = 1;
    pub const TRAIN_LOOP: u64 = 2;
    pub const EVAL_DATA: u64 = 1_000;
}

/// A labelled batch of either task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskBatch {
    PrefixSum(PrefixSumBatch),
    Inversion(InversionBatch),
}

impl TaskBatch {
    pub fn count(&self) -> usize {
        match self {
            TaskBatch::PrefixSum(b) => b.count(),
            TaskBatch::Inversion(b) => b.count(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            TaskBatch::PrefixSum(b) => TaskBatch::PrefixSum(b.select(idx)),
            TaskBatch::Inversion(b) => TaskBatch::Inversion(b.select(idx)),
        }
    }

    /// Clean network inputs.
    pub fn inputs(&self) -> Tensor {
        match self {
            TaskBatch::PrefixSum(b) => b.bits.clone(),
            TaskBatch::Inversion(b) => b.a.clone(),
        }
    }

    /// Training inputs, with fresh noise for inversion.
    pub fn noisy_inputs<R: Rng + ?Sized>(&self, noise_scale: f64, rng: &mut R) -> Tensor {
        match self {
            TaskBatch::PrefixSum(b) => b.bits.clone(),
            TaskBatch::Inversion(b) => b.noisy_inputs(noise_scale, rng),
        }
    }

    /// Task loss on the readout output.
    pub fn loss(&self) -> Box<dyn Fn(&mut Tape, Var) -> Result<Var> + '_> {
        match self {
            TaskBatch::PrefixSum(b) => {
                let labels: Arc<[usize]> = b.labels.clone();
                Box::new(move |tape: &mut Tape, out: Var| prefix_sum_loss(tape, out, &labels))
            }
            TaskBatch::Inversion(b) => Box::new(move |tape: &mut Tape, out: Var| mse_loss(tape, out, &b.target)),
        }
    }
}

/// Mean over entries of `(out - target)^2`.
pub fn mse_loss(tape: &mut Tape, out: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(out, t)?;
    let s = tape.dot(d, d)?;
    tape.scale(s, 1.0 / target.numel() as f64)
}

pub fn train_set(cfg: &ExperimentConfig) -> Result<TaskBatch> {
    let seed = derive_seed(cfg.seed, streams::TRAIN_DATA);
    Ok(match cfg.task {
        crate::tasks::Task::PrefixSum => {
            TaskBatch::PrefixSum(gen_prefix_sum(cfg.data.train_count, cfg.data.train_length, seed)?)
        }
        crate::tasks::Task::MatrixInversion => TaskBatch::Inversion(gen_inversion(
            cfg.data.train_count,
            cfg.data.dim,
            INVERSION_TRAIN_KAPPA,
            seed,
        )?),
    })
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Length(l) => streams::EVAL_DATA + l as u64,
        Split::Kappa(lo, hi) => streams::EVAL_DATA ^ lo.to_bits() ^ hi.to_bits().rotate_left(17),
    }
}

/// Validation data for a split. At the training length, strings from the
/// training set are excluded.
pub fn split_set(cfg: &ExperimentConfig, split: &str) -> Result<TaskBatch> {
    let parsed = Split::parse(cfg.task, split)?;
    let seed = derive_seed(cfg.seed, split_stream(parsed));
    let count = cfg.data.eval_count;
    Ok(match parsed {
        Split::Length(l) => {
            let space = if l >= 64 { u128::MAX } else { 1u128 << l };
            let pool = count + cfg.data.train_count;
            if l == cfg.data.train_length && (pool as u128) <= space {
                let TaskBatch::PrefixSum(train) = train_set(cfg)? else {
                    unreachable!("prefix-sum config")
                };
                let seen: HashSet<Vec<u8>> = train.rows().into_iter().collect();
                let cand = gen_prefix_sum(pool, l, seed)?;
                let keep: Vec<usize> = cand
                    .rows()
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| !seen.contains(*r))
                    .map(|(i, _)| i)
                    .take(count)
                    .collect();
                TaskBatch::PrefixSum(cand.select(&keep))
            } else {
                TaskBatch::PrefixSum(gen_prefix_sum(count, l, seed)?)
            }
        }
        Split::Kappa(lo, hi) => TaskBatch::Inversion(gen_inversion(count, cfg.data.dim, (lo, hi), seed)?),
    })
}
