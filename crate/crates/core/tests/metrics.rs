mod common;

use common::{affine_fixed_point, rng};
use deq_core::cells::AffineCell;
use deq_core::metrics::{
    aa_score, aa_score_kernel, adversarial_attack, probit, random_directions, residual_curve,
    trajectory_projection, trajectory_projection_model, AaOptions, AttackConfig, AttackInit,
    KernelConfig, Pairing, SimilarityKernel,
};
use deq_core::solvers::{solve_model, SolverConfig, SolverMethod, Termination};
use deq_core::Tensor;
use proptest::prelude::*;

fn contractive(seed: u64) -> (AffineCell, Tensor) {
    let mut r = rng(seed);
    let cell = AffineCell::random(6, 3, 0.6, &mut r).unwrap();
    let x = Tensor::randn(&[5, 3], &mut r);
    (cell, x)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

#[test]
fn contractive_cell_is_path_independent_under_any_pairing() {
    let (cell, x) = contractive(1);
    let solver = SolverConfig::anderson(200).with_tol(1e-12);
    for pairing in [
        Pairing::Rotate(1),
        Pairing::Rotate(3),
        Pairing::Explicit(vec![4, 3, 0, 1, 2]),
    ] {
        let opts = AaOptions {
            pairing,
            ..AaOptions::default()
        };
        let rep = aa_score(&cell, &x, &solver, &opts).unwrap();
        assert!(rep.mean() >= 0.999, "{}", rep.mean());
        assert!(rep.flagged.iter().all(|f| !f));
    }
    // Canonical fixed points match the analytic solution.
    let rep = aa_score(&cell, &x, &solver, &AaOptions::default()).unwrap();
    let exact = affine_fixed_point(&cell, &x);
    assert!(rep.canonical.max_abs_diff(&exact) < 1e-9);
}

#[test]
fn state_independent_cell_scores_one() {
    let mut r = rng(2);
    let b = Tensor::randn(&[4, 2], &mut r);
    let c = Tensor::randn(&[4], &mut r);
    let cell = AffineCell::new(Tensor::zeros(&[4, 4]), b, c).unwrap();
    let x = Tensor::randn(&[3, 2], &mut r);
    let rep = aa_score(&cell, &x, &SolverConfig::naive(1), &AaOptions::default()).unwrap();
    for s in &rep.scores {
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }
}

#[test]
fn scores_are_invariant_to_rescaling_the_state() {
    // z = A z + c(B x + c0) has fixed point c times the original.
    let (cell, x) = contractive(3);
    let solver = SolverConfig::naive(60);
    let base = aa_score(&cell, &x, &solver, &AaOptions::default()).unwrap();
    let k = 7.5;
    let scaled = AffineCell::new(cell.a().clone(), cell.b().scaled(k), cell.c().scaled(k)).unwrap();
    let rep = aa_score(&scaled, &x, &solver, &AaOptions::default()).unwrap();
    for (a, b) in base.scores.iter().zip(&rep.scores) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn two_example_swap_matches_the_interchange_algorithm() {
    let mut r = rng(4);
    // Non-contractive but bounded for a short budget so the scores are not 1.
    let cell = AffineCell::random(5, 2, 0.98, &mut r).unwrap();
    let x = Tensor::randn(&[2, 2], &mut r);
    let solver = SolverConfig::naive(12);
    let opts = AaOptions {
        pairing: Pairing::Explicit(vec![1, 0]),
        ..AaOptions::default()
    };
    let rep = aa_score(&cell, &x, &solver, &opts).unwrap();

    let x0 = x.select_rows(&[0]);
    let x1 = x.select_rows(&[1]);
    let zero = Tensor::zeros(&[1, 5]);
    let z0 = solve_model(&cell, &x0, &zero, &solver).unwrap().final_state;
    let z1 = solve_model(&cell, &x1, &zero, &solver).unwrap().final_state;
    let z0b = solve_model(&cell, &x0, &z1, &solver).unwrap().final_state;
    let z1b = solve_model(&cell, &x1, &z0, &solver).unwrap().final_state;
    let want = [cos(z0b.data(), z0.data()), cos(z1b.data(), z1.data())];
    for (got, want) in rep.scores.iter().zip(want) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!(want.iter().any(|w| *w < 0.999_999));
}

#[test]
fn aa_is_deterministic() {
    let (cell, x) = contractive(5);
    let solver = SolverConfig::broyden(15);
    let opts = AaOptions {
        repeats: 3,
        ..AaOptions::default()
    };
    let a = aa_score(&cell, &x, &solver, &opts).unwrap();
    let b = aa_score(&cell, &x, &solver, &opts).unwrap();
    assert_eq!(a.scores, b.scores);
}

#[test]
fn divergent_examples_score_minus_one_and_are_flagged() {
    let mut r = rng(6);
    let cell = AffineCell::random(4, 2, 3.0, &mut r).unwrap();
    let x = Tensor::randn(&[3, 2], &mut r);
    let rep = aa_score(&cell, &x, &SolverConfig::naive(200), &AaOptions::default()).unwrap();
    assert!(rep.flagged.iter().all(|f| *f));
    assert!(rep.scores.iter().all(|s| *s == -1.0));
    assert_eq!(rep.mean_unflagged(), None);
    assert_eq!(rep.flagged_fraction(), 1.0);
}

#[test]
fn identity_pairing_is_rejected() {
    assert!(Pairing::Explicit(vec![0, 1]).permutation(2).is_err());
    assert!(Pairing::Rotate(2).permutation(2).is_err());
    assert!(Pairing::Explicit(vec![1, 1, 0]).permutation(3).is_err());
}

#[test]
fn kernels_are_monotone_in_angle() {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..=36)
        .map(|k| {
            let th = std::f64::consts::PI * k as f64 / 36.0;
            (vec![2.0, 0.0, 0.0], vec![3.0 * th.cos(), 3.0 * th.sin(), 0.0])
        })
        .collect();
    for kernel in [
        SimilarityKernel::Cosine,
        SimilarityKernel::Gaussian,
        SimilarityKernel::Laplacian,
        SimilarityKernel::InvMultiquadric,
    ] {
        for eps in [0.5, 5000.0] {
            let s: Vec<f64> = aa_score_kernel(&pairs, &KernelConfig::new(kernel, eps))
                .unwrap()
                .into_iter()
                .map(Option::unwrap)
                .collect();
            assert!((s[0] - 1.0).abs() < 1e-12);
            assert!(s.windows(2).all(|w| w[1] <= w[0]), "{kernel} {eps}: {s:?}");
        }
    }
    let cosine = KernelConfig::default();
    assert!((cosine.score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
    assert_eq!(cosine.score(&[0.0, 0.0], &[1.0, 0.0]), None);
}

// Standard normal CDF through the Maclaurin series of erf, which converges
// for every argument needed here.
fn phi(x: f64) -> f64 {
    let y = x / std::f64::consts::SQRT_2;
    let mut term = y;
    let mut sum = y;
    for n in 1..200 {
        term *= -y * y / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
}

fn inverse_phi(p: f64) -> f64 {
    let (mut lo, mut hi) = (-6.0, 6.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn probit_matches_a_bisection_oracle() {
    assert_eq!(probit(0.5), 0.0);
    for p in [0.001, 0.01, 0.02425, 0.1, 0.3, 0.62, 0.9, 0.975, 0.99, 0.999] {
        let want = inverse_phi(p);
        assert!((probit(p) - want).abs() < 1e-8, "p={p}: {} vs {want}", probit(p));
    }
    assert!((probit(0.975) - 1.959_963_984_540_054).abs() < 1e-8);
    assert_eq!(probit(0.9999), probit(0.999));
    assert_eq!(probit(0.0), probit(0.001));
    assert!((probit(0.2) + probit(0.8)).abs() < 1e-12);
}

#[test]
fn attack_cannot_break_a_contractive_cell() {
    let mut r = rng(7);
    let cell = AffineCell::random(6, 3, 0.6, &mut r).unwrap();
    let x = Tensor::randn(&[1, 3], &mut r);
    let solver = SolverConfig::anderson(60).with_tol(1e-12);
    for init in [AttackInit::Encoded, AttackInit::Normal] {
        let cfg = AttackConfig {
            updates: 50,
            restarts: 5,
            init,
            seed: 11,
        };
        let res = adversarial_attack(&cell, &x, &solver, &cfg).unwrap();
        assert_eq!(res.restarts.len(), 5);
        assert!(res.attacked_aa >= 0.999, "{}", res.attacked_aa);
        assert!(!res.diverged);
        let exact = affine_fixed_point(&cell, &x);
        assert!(res.attacked_state.max_abs_diff(&exact) < 1e-8);
    }
}

#[test]
fn attack_lowers_the_surrogate_on_a_rotation_cell() {
    // A = rotation by 90 degrees in each plane: z -> A z + u has a unique
    // fixed point but plain iteration cycles, so the cosine surrogate
    // between z and f^T(z) depends on the start.
    let a = Tensor::new(vec![2, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap();
    let cell = AffineCell::new(a, Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(), Tensor::zeros(&[2]))
        .unwrap();
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let cfg = AttackConfig {
        updates: 20,
        restarts: 1,
        init: AttackInit::Normal,
        seed: 3,
    };
    let res = adversarial_attack(&cell, &x, &SolverConfig::naive(3), &cfg).unwrap();
    let (before, after) = res.restarts[0].objective;
    assert!(after <= before, "{before} -> {after}");
}

#[test]
fn attack_rejects_batches() {
    let (cell, x) = contractive(8);
    let err = adversarial_attack(&cell, &x, &SolverConfig::naive(5), &AttackConfig::default());
    assert!(err.is_err());
}

fn rotation(theta: f64) -> impl Fn(&Tensor) -> deq_core::Result<Tensor> {
    move |z: &Tensor| {
        let (c, s) = (theta.cos(), theta.sin());
        let d = z.data();
        Tensor::new(vec![1, 2], vec![c * d[0] - s * d[1], s * d[0] + c * d[1]])
    }
}

#[test]
fn rotation_map_plateaus_without_divergence() {
    let theta = 0.3;
    let z0 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let cfg = SolverConfig::naive(50);
    let curves = residual_curve(rotation(theta), &z0, &[cfg]).unwrap();
    let plateau = 2.0 * (theta / 2.0).sin();
    for t in 1..=50 {
        assert!((curves.residual(0, t) - plateau).abs() < 1e-12);
    }
    assert_eq!(curves.diverged_at(0), None);
    assert_eq!(curves.traces[0].termination, Termination::BudgetExhausted);
    assert!(curves.distance.is_empty());
}

#[test]
fn contraction_residuals_and_cross_distance_vanish() {
    let (cell, x) = contractive(9);
    let x = x.select_rows(&[0]);
    let z0 = Tensor::zeros(&[1, 6]);
    let solvers = [
        SolverConfig::new(SolverMethod::Naive, 80).with_tol(0.0),
        SolverConfig::new(SolverMethod::Broyden, 80).with_tol(0.0),
    ];
    let curves = deq_core::metrics::residual_curve_model(&cell, &x, &z0, &solvers).unwrap();
    assert!(curves.residual(0, 80) < 1e-10);
    assert!(curves.residual(1, 80) < 1e-10);
    assert_eq!(curves.distance.len(), 81);
    assert_eq!(curves.distance[0], 0.0);
    assert!(*curves.distance.last().unwrap() < 1e-10);

    let mut buf = Vec::new();
    curves.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 80);
    assert!(text.starts_with("step,solver,residual,diverged"));
}

#[test]
fn doubling_map_is_flagged_at_the_blow_up_step() {
    let z0 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let double = |z: &Tensor| Ok(z.scaled(2.0));
    let curves = residual_curve(double, &z0, &[SolverConfig::naive(40)]).unwrap();
    let want = (1..).find(|t| 2f64.powi(*t) > 1e8).unwrap() as usize;
    assert_eq!(curves.diverged_at(0), Some(want));
    assert!(residual_curve(double, &z0, &[SolverConfig::naive(40), SolverConfig::naive(30)]).is_err());
}

#[test]
fn projection_of_a_contraction_collapses() {
    let (cell, x) = contractive(10);
    let x = x.select_rows(&[0]);
    let mut r = rng(12);
    let inits: Vec<Tensor> = (0..5).map(|_| Tensor::randn(&[1, 6], &mut r).scaled(10.0)).collect();
    let proj = trajectory_projection_model(&cell, &x, &inits, 120, 99).unwrap();
    assert_eq!(proj.trajectories.len(), 5);
    let ends: Vec<(f64, f64)> = proj.trajectories.iter().map(|t| *t.last().unwrap()).collect();
    for e in &ends {
        assert!((e.0 - ends[0].0).abs() < 1e-6 && (e.1 - ends[0].1).abs() < 1e-6);
    }
    assert_eq!(proj.trajectories[0].len(), 121);

    let mut buf = Vec::new();
    proj.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("trajectory_id,step,u,v"));
}

#[test]
fn constant_map_trajectories_coincide_after_one_step() {
    let mut r = rng(13);
    let target = Tensor::randn(&[1, 8], &mut r);
    let inits: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[1, 8], &mut r)).collect();
    let t2 = target.clone();
    let proj = trajectory_projection(move |_z: &Tensor| Ok(t2.clone()), &inits, 3, 1).unwrap();
    for t in 1..=3 {
        for tr in &proj.trajectories {
            assert_eq!(tr[t], proj.trajectories[0][t]);
        }
    }
}

proptest! {
    #[test]
    fn directions_are_orthonormal(dim in 2usize..200, seed in any::<u64>()) {
        let [a, b] = random_directions(dim, seed).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(dot.abs() < 1e-12);
        prop_assert!((na - 1.0).abs() < 1e-12 && (nb - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_range(seed in 0u64..500, norm in 0.1f64..1.6, budget in 1usize..30) {
        let mut r = rng(seed);
        let cell = AffineCell::random(4, 2, norm, &mut r).unwrap();
        let x = Tensor::randn(&[3, 2], &mut r);
        let rep = aa_score(&cell, &x, &SolverConfig::naive(budget), &AaOptions::default()).unwrap();
        prop_assert!(rep.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        let mean = rep.scores.iter().sum::<f64>() / 3.0;
        prop_assert!((rep.mean() - mean).abs() < 1e-15);
    }
}
