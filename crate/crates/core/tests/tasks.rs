mod common;

use std::collections::HashSet;
use std::sync::Arc;

use common::rng;
use deq_core::tasks::*;
use deq_core::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn ten_thousand_unique_training_strings() {
    let b = gen_prefix_sum(10_000, 32, 0).unwrap();
    let rows = b.rows();
    let unique: HashSet<_> = rows.iter().collect();
    assert_eq!(unique.len(), 10_000);
    // Brute-force recheck: label_t = label_{t-1} xor bit_t.
    for (i, r) in rows.iter().enumerate() {
        let mut acc = 0;
        for (t, bit) in r.iter().enumerate() {
            acc ^= *bit as usize;
            assert_eq!(b.labels[i * 32 + t], acc);
        }
    }
}

#[test]
fn too_many_strings_is_a_config_error() {
    assert!(matches!(gen_prefix_sum(9, 3, 0), Err(deq_core::Error::Config(_))));
}

fn logits_from(pred: &[Vec<usize>], margin: f64) -> Tensor {
    let (b, l) = (pred.len(), pred[0].len());
    let mut d = vec![0.0; b * 2 * l];
    for (i, row) in pred.iter().enumerate() {
        for (p, &y) in row.iter().enumerate() {
            d[(i * 2 + y) * l + p] = margin;
            d[(i * 2 + 1 - y) * l + p] = -margin;
        }
    }
    Tensor::new(vec![b, 2, l], d).unwrap()
}

#[test]
fn cross_entropy_values() {
    let labels: Arc<[usize]> = vec![0, 1, 1, 0, 0, 1].into();
    let uniform = Tensor::zeros(&[2, 2, 3]);
    assert!((prefix_sum_loss_value(&uniform, &labels).unwrap() - 2f64.ln()).abs() < 1e-15);

    let rows = vec![vec![0, 1, 1], vec![0, 0, 1]];
    let perfect = logits_from(&rows, 20.0);
    assert!(prefix_sum_loss_value(&perfect, &labels).unwrap() < 1e-8);

    // Hand computation: -log softmax of the labelled class per position.
    let d = vec![
        1.0, -0.5, 2.0, /* class 0, ex 0 */ 0.0, 0.5, -1.0, /* class 1, ex 0 */
        0.3, 0.0, 0.0, /* class 0, ex 1 */ -0.3, 1.0, 0.0, /* class 1, ex 1 */
    ];
    let logits = Tensor::new(vec![2, 2, 3], d.clone()).unwrap();
    let mut total = 0.0;
    for i in 0..2 {
        for p in 0..3 {
            let z0 = d[(i * 2) * 3 + p];
            let z1 = d[(i * 2 + 1) * 3 + p];
            let y = labels[i * 3 + p];
            let zy = if y == 0 { z0 } else { z1 };
            total += (z0.exp() + z1.exp()).ln() - zy;
        }
    }
    let want = total / 6.0;
    assert!((prefix_sum_loss_value(&logits, &labels).unwrap() - want).abs() < 1e-14);
}

#[test]
fn accuracy_counting() {
    let b = gen_prefix_sum(10, 32, 4).unwrap();
    let rows: Vec<Vec<usize>> = (0..10)
        .map(|i| b.labels[i * 32..(i + 1) * 32].to_vec())
        .collect();
    let good = logits_from(&rows, 1.0);
    assert_eq!(bit_accuracy(&good, &b.labels).unwrap(), 1.0);
    assert_eq!(string_accuracy(&good, &b.labels).unwrap(), 1.0);
    let mut one_off = rows.clone();
    one_off[3][17] ^= 1;
    let bad = logits_from(&one_off, 1.0);
    assert!((bit_accuracy(&bad, &b.labels).unwrap() - 319.0 / 320.0).abs() < 1e-15);
    assert!((string_accuracy(&bad, &b.labels).unwrap() - 0.9).abs() < 1e-15);
    assert!(!strings_correct(&bad, &b.labels).unwrap()[3]);
}

#[test]
fn random_logits_almost_never_get_a_string_right() {
    let b = gen_prefix_sum(10_000, 32, 8).unwrap();
    let logits = Tensor::randn(&[10_000, 2, 32], &mut rng(1));
    let s = string_accuracy(&logits, &b.labels).unwrap();
    let bit = bit_accuracy(&logits, &b.labels).unwrap();
    assert!(s < 1e-3, "{s}");
    // 320k fair coin flips: 5 sigma is under 0.5%.
    assert!((bit - 0.5).abs() < 0.005, "{bit}");
}

fn singular_values(m: &[f64], d: usize) -> Vec<f64> {
    DMatrix::from_row_slice(d, d, m).singular_values().iter().copied().collect()
}

#[test]
fn requested_condition_numbers_are_hit() {
    for &kappa in &[1.0, 2.0, 10.0, 30.0, 50.0, 1000.0] {
        for &d in &[10usize, 20] {
            let b = gen_inversion(5, d, (kappa, kappa), 11).unwrap();
            for i in 0..5 {
                let s = singular_values(b.a.row(i), d);
                let max = s.iter().copied().fold(0.0, f64::max);
                let min = s.iter().copied().fold(f64::INFINITY, f64::min);
                assert!(((max / min) / kappa - 1.0).abs() < 0.01, "kappa {kappa} d {d}");
                let a = DMatrix::from_row_slice(d, d, b.a.row(i));
                let t = DMatrix::from_row_slice(d, d, b.target.row(i));
                let err = (&a * &t - DMatrix::<f64>::identity(d, d)).norm() / d as f64;
                assert!(err < 1e-8, "kappa {kappa}: {err}");
            }
        }
    }
    let b = gen_inversion(200, 10, INVERSION_TRAIN_KAPPA, 3).unwrap();
    assert!(b.kappas.iter().all(|k| (1.0..=10.0).contains(k)));
    assert!(gen_inversion(1, 3, (0.5, 2.0), 0).is_err());
}

/// 3x3 inverse by the adjugate formula.
fn adjugate_inverse(m: &[f64]) -> Vec<f64> {
    let e = |r: usize, c: usize| m[r * 3 + c];
    let cof = |r: usize, c: usize| {
        let rs: Vec<usize> = (0..3).filter(|x| *x != r).collect();
        let cs: Vec<usize> = (0..3).filter(|x| *x != c).collect();
        let minor = e(rs[0], cs[0]) * e(rs[1], cs[1]) - e(rs[0], cs[1]) * e(rs[1], cs[0]);
        if (r + c).is_multiple_of(2) { minor } else { -minor }
    };
    let det: f64 = (0..3).map(|c| e(0, c) * cof(0, c)).sum();
    let mut inv = vec![0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            inv[r * 3 + c] = cof(c, r) / det;
        }
    }
    inv
}

#[test]
fn inversion_error_matches_adjugate_oracle() {
    let mut r = rng(21);
    let a = Tensor::randn(&[1, 3, 3], &mut r);
    let pred = Tensor::randn(&[1, 3, 3], &mut r);
    let inv = adjugate_inverse(a.data());
    let want: f64 = pred.data().iter().zip(&inv).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 9.0;
    assert!((inversion_error(&pred, &a).unwrap() - want).abs() < 1e-12);
}

#[test]
fn noise_touches_inputs_only() {
    let b = gen_inversion(4, 3, (1.0, 5.0), 2).unwrap();
    let x = b.noisy_inputs(0.01, &mut rng(0));
    let diff = x.sub(&b.a).unwrap();
    assert!(diff.norm() > 0.0 && diff.data().iter().all(|v| v.abs() < 0.1));
    let again = gen_inversion(4, 3, (1.0, 5.0), 2).unwrap();
    assert_eq!(again.target, b.target);
}

#[test]
fn same_seed_same_bytes() {
    let p1 = encode_dataset(&Dataset::PrefixSum(gen_prefix_sum(50, 64, 9).unwrap()), 9);
    let p2 = encode_dataset(&Dataset::PrefixSum(gen_prefix_sum(50, 64, 9).unwrap()), 9);
    assert_eq!(p1, p2);
    let i1 = encode_dataset(&Dataset::Inversion(gen_inversion(5, 4, (1.0, 3.0), 9).unwrap()), 9);
    let i2 = encode_dataset(&Dataset::Inversion(gen_inversion(5, 4, (1.0, 3.0), 9).unwrap()), 9);
    assert_eq!(i1, i2);
    let other = encode_dataset(&Dataset::PrefixSum(gen_prefix_sum(50, 64, 10).unwrap()), 10);
    assert_ne!(p1, other);
}

#[test]
fn dumps_round_trip() {
    let p = Dataset::PrefixSum(gen_prefix_sum(13, 7, 1).unwrap());
    let (h, back) = decode_dataset(&encode_dataset(&p, 1)).unwrap();
    assert_eq!((h.task, h.size, h.count, h.seed), (Task::PrefixSum, 7, 13, 1));
    assert_eq!(back, p);
    let inv = Dataset::Inversion(gen_inversion(3, 5, (1.0, 4.0), 2).unwrap());
    let (h, back) = decode_dataset(&encode_dataset(&inv, 2)).unwrap();
    assert_eq!(h.task, Task::MatrixInversion);
    assert_eq!(back, inv);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.bin");
    write_dataset(&path, &p, 1).unwrap();
    assert_eq!(read_dataset(&path).unwrap().1, p);
}

#[test]
fn corrupt_dumps_are_rejected() {
    let good = encode_dataset(&Dataset::PrefixSum(gen_prefix_sum(3, 5, 1).unwrap()), 1);
    assert!(decode_dataset(&good[..good.len() - 1]).is_err());
    let mut extra = good.clone();
    extra.push(0);
    assert!(decode_dataset(&extra).is_err());
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(decode_dataset(&magic).is_err());
    // 15 bits occupy two bytes; the top bit of the last byte is padding.
    let mut pad = good.clone();
    *pad.last_mut().unwrap() |= 0x80;
    assert!(decode_dataset(&pad).is_err());
    let mut tag = good.clone();
    tag[12] = 7;
    assert!(decode_dataset(&tag).is_err());
    let mut count = good.clone();
    count[20..28].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(decode_dataset(&count).is_err());

    let inv = encode_dataset(&Dataset::Inversion(gen_inversion(1, 2, (2.0, 2.0), 1).unwrap()), 1);
    let mut nan = inv.clone();
    let at = nan.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(decode_dataset(&nan).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn labels_follow_xor_recursion(seed in any::<u64>(), length in 1usize..80, count in 1usize..40) {
        let count = if length < 6 { count.min(1 << length) } else { count };
        let b = gen_prefix_sum(count, length, seed).unwrap();
        prop_assert!(b.labels_consistent());
        for i in 0..count {
            let row = &b.labels[i * length..(i + 1) * length];
            let bits = b.bits.row(i);
            prop_assert_eq!(row[0], bits[0] as usize);
            for t in 1..length {
                prop_assert_eq!(row[t], row[t - 1] ^ bits[t] as usize);
            }
        }
    }
}
