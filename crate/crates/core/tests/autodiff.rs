mod common;

use common::kernel_cases;
use deq_core::autodiff::{grad_check, Tape};
use deq_core::Tensor;
use proptest::prelude::*;

#[test]
fn every_kernel_matches_central_differences() {
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..20 {
        for (k, inputs) in kernel_cases(seed) {
            let err = grad_check(&k, &inputs, seed).unwrap();
            assert!(err < 1e-5, "{} seed {seed}: {err:e}", k.name());
            seen.insert(k.name());
        }
    }
    assert_eq!(seen.len(), 15);
}

#[test]
fn fan_out_accumulates() {
    // d/dx of x.x + 3x summed is 2x + 3
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let sq = tape.dot(x, x).unwrap();
    let three = tape.scale(x, 3.0).unwrap();
    let m = tape.reduce_mean(three).unwrap();
    let m3 = tape.scale(m, 3.0).unwrap();
    let loss = tape.add(sq, m3).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_check_holds_for_arbitrary_seeds(seed in 1000u64..1_000_000) {
        for (k, inputs) in kernel_cases(seed) {
            let err = grad_check(&k, &inputs, seed).unwrap();
            prop_assert!(err < 1e-5, "{} {err:e}", k.name());
        }
    }
}
