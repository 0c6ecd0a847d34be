use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::{Kernel, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Bit strings with per-position prefix parities.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSumBatch {
    /// `(count, length)` with entries 0.0 or 1.0.
    pub bits: Tensor,
    /// Row-major `(count, length)` parity labels.
    pub labels: Arc<[usize]>,
    pub length: usize,
}

/// `label_t = bit_0 xor ... xor bit_t`.
pub fn prefix_parity(bits: &[u8]) -> Vec<u8> {
    let mut acc = 0u8;
    bits.iter()
        .map(|b| {
            acc ^= b & 1;
            acc
        })
        .collect()
}

impl PrefixSumBatch {
    /// Builds a batch from explicit rows of bits.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let length = rows.first().map(Vec::len).unwrap_or(0);
        if length == 0 || rows.iter().any(|r| r.len() != length || r.iter().any(|b| *b > 1)) {
            return Err(Error::Config(
                "prefix-sum rows must be non-empty, equal-length and binary".into(),
            ));
        }
        let bits: Vec<f64> = rows.iter().flatten().map(|b| *b as f64).collect();
        let labels: Vec<usize> = rows
            .iter()
            .flat_map(|r| prefix_parity(r))
            .map(usize::from)
            .collect();
        Ok(Self {
            bits: Tensor::new(vec![rows.len(), length], bits)?,
            labels: labels.into(),
            length,
        })
    }

    pub fn count(&self) -> usize {
        self.bits.shape()[0]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.count())
            .map(|i| self.bits.row(i).iter().map(|b| *b as u8).collect())
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let l = self.length;
        let labels: Vec<usize> = idx
            .iter()
            .flat_map(|&i| self.labels[i * l..(i + 1) * l].iter().copied())
            .collect();
        Self {
            bits: self.bits.select_rows(idx),
            labels: labels.into(),
            length: l,
        }
    }

    /// Re-derives every label from the bits.
    pub fn labels_consistent(&self) -> bool {
        self.rows()
            .iter()
            .enumerate()
            .all(|(i, r)| {
                prefix_parity(r)
                    .iter()
                    .zip(&self.labels[i * self.length..(i + 1) * self.length])
                    .all(|(a, b)| *a as usize == *b)
            })
    }
}

/// `count` distinct uniformly drawn bit strings of `length` bits.
pub fn gen_prefix_sum(count: usize, length: usize, seed: u64) -> Result<PrefixSumBatch> {
    if count == 0 || length == 0 {
        return Err(Error::Config("count and length must be positive".into()));
    }
    let space = if length >= 64 { u128::MAX } else { 1u128 << length };
    if count as u128 > space {
        return Err(Error::Config(format!(
            "cannot draw {count} unique strings of length {length}"
        )));
    }
    let mut rng = seeded(seed);
    let rows: Vec<Vec<u8>> = if length <= 24 && (count as u128) * 2 > space {
        // Dense regime: sample codes without replacement.
        index::sample(&mut rng, space as usize, count)
            .into_iter()
            .map(|code| (0..length).map(|b| ((code >> (length - 1 - b)) & 1) as u8).collect())
            .collect()
    } else {
        let mut seen = HashSet::with_capacity(count);
        let mut rows = Vec::with_capacity(count);
        while rows.len() < count {
            let row: Vec<u8> = (0..length).map(|_| rng.gen_range(0..2u8)).collect();
            if seen.insert(row.clone()) {
                rows.push(row);
            }
        }
        rows
    };
    PrefixSumBatch::from_rows(&rows)
}

/// Mean two-class cross entropy over batch and positions, on the tape.
pub fn prefix_sum_loss(tape: &mut Tape, logits: Var, labels: &Arc<[usize]>) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels.clone())
}

/// Untraced version of [`prefix_sum_loss`].
pub fn prefix_sum_loss_value(logits: &Tensor, labels: &Arc<[usize]>) -> Result<f64> {
    Ok(Kernel::SoftmaxCrossEntropy(labels.clone())
        .forward(&[logits])?
        .item())
}

/// Per-position argmax over the class axis of `(batch, classes, length)`;
/// ties go to the lower class.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let [b, c, l] = match logits.shape() {
        [b, c, l] => [*b, *c, *l],
        s => {
            return Err(Error::dim(
                "predictions",
                format!("logits must be (B, C, L), got {s:?}"),
            ))
        }
    };
    let d = logits.data();
    let mut out = Vec::with_capacity(b * l);
    for i in 0..b {
        for p in 0..l {
            let mut best = 0;
            for k in 1..c {
                if d[(i * c + k) * l + p] > d[(i * c + best) * l + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 3 || labels.len() != s[0] * s[2] {
        return Err(Error::dim(
            "accuracy",
            format!("{} labels for logits {s:?}", labels.len()),
        ));
    }
    Ok((s[0], s[2]))
}

pub fn bit_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let pred = predictions(logits)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Whether every position of each string is predicted correctly.
pub fn strings_correct(logits: &Tensor, labels: &[usize]) -> Result<Vec<bool>> {
    let (b, l) = check_labels(logits, labels)?;
    let pred = predictions(logits)?;
    Ok((0..b)
        .map(|i| pred[i * l..(i + 1) * l] == labels[i * l..(i + 1) * l])
        .collect())
}

pub fn string_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = strings_correct(logits, labels)?;
    Ok(c.iter().filter(|v| **v).count() as f64 / c.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_parities() {
        assert_eq!(prefix_parity(&[0, 1, 1, 0]), vec![0, 1, 0, 0]);
        assert_eq!(prefix_parity(&[0; 7]), vec![0; 7]);
    }

    #[test]
    fn dense_regime_enumerates_everything() {
        let b = gen_prefix_sum(16, 4, 3).unwrap();
        let mut rows = b.rows();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 16);
        assert!(gen_prefix_sum(17, 4, 3).is_err());
    }
}
