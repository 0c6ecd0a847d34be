mod common;

use common::{affine_fixed_point, rng};
use deq_core::cells::{AffineCell, CellMap};
use deq_core::solvers::{
    anderson_solve, broyden_solve, fixed_point_iterate, solve, solve_model, ExampleStatus,
    SolverConfig, SolverMethod, Termination,
};
use deq_core::{Error, Tensor};

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1, 1], vec![v]).unwrap()
}

fn halve_toward_one(z: &Tensor) -> deq_core::Result<Tensor> {
    Ok(z.map(|v| (v + 1.0) / 2.0))
}

#[test]
fn naive_scalar_converges_to_one() {
    let tr = fixed_point_iterate(halve_toward_one, &scalar(0.0), &SolverConfig::naive(50)).unwrap();
    assert_eq!(tr.steps(), 50);
    assert!((tr.final_state.item() - 1.0).abs() < 1e-9);
    assert_eq!(tr.termination, Termination::BudgetExhausted);
}

#[test]
fn naive_doubling_is_flagged_before_overflow() {
    let tr = fixed_point_iterate(|z: &Tensor| Ok(z.scaled(2.0)), &scalar(1.0), &SolverConfig::naive(2000))
        .unwrap();
    assert_eq!(tr.termination, Termination::Diverged);
    match tr.status[0] {
        ExampleStatus::Diverged { step } => assert!(step < 100, "step {step}"),
        s => panic!("unexpected {s:?}"),
    }
    assert!(tr.final_state.all_finite());
    assert!(tr.final_state.norm() <= 1e8);
}

fn contraction(seed: u64, n: usize, norm: f64) -> (AffineCell, Tensor) {
    let mut r = rng(seed);
    let cell = AffineCell::random(n, 3, norm, &mut r).unwrap();
    let x = Tensor::randn(&[4, 3], &mut r);
    (cell, x)
}

#[test]
fn all_methods_hit_linear_oracle() {
    let (cell, x) = contraction(7, 6, 0.5);
    let want = affine_fixed_point(&cell, &x);
    let z0 = Tensor::zeros(&[4, 6]);
    for cfg in [
        SolverConfig::naive(200).with_tol(1e-12),
        SolverConfig::anderson(200).with_tol(1e-12),
        SolverConfig::broyden(200).with_tol(1e-12),
    ] {
        let tr = solve_model(&cell, &x, &z0, &cfg).unwrap();
        assert_eq!(tr.termination, Termination::Converged, "{:?}", cfg.method);
        assert!(tr.final_state.max_abs_diff(&want) < 1e-8, "{:?}", cfg.method);
    }
}

#[test]
fn anderson_needs_no_more_steps_than_naive() {
    for seed in 0..5 {
        let (cell, x) = contraction(seed, 8, 0.5);
        let z0 = Tensor::zeros(&[4, 8]);
        let naive = solve_model(&cell, &x, &z0, &SolverConfig::naive(500).with_tol(1e-10)).unwrap();
        let aa = solve_model(&cell, &x, &z0, &SolverConfig::anderson(500).with_tol(1e-10)).unwrap();
        assert_eq!(aa.termination, Termination::Converged);
        assert!(aa.steps() <= naive.steps(), "seed {seed}: {} vs {}", aa.steps(), naive.steps());
    }
}

#[test]
fn anderson_memory_one_with_heavy_ridge_still_converges() {
    let (cell, x) = contraction(3, 5, 0.5);
    let z0 = Tensor::zeros(&[4, 5]);
    let cfg = SolverConfig::anderson(200).with_memory(1).with_ridge(1e6);
    let aa = solve_model(&cell, &x, &z0, &cfg).unwrap();
    let naive = solve_model(&cell, &x, &z0, &SolverConfig::naive(200)).unwrap();
    let last = aa.final_residuals();
    assert!(last.iter().all(|r| *r < 1e-12));
    // With one pair the mixing weight is 1, so the residual sequence matches naive.
    for (a, b) in aa.residual_series(deq_core::solvers::Reduction::Mean)[0]
        .iter()
        .zip(&naive.residual_series(deq_core::solvers::Reduction::Mean)[0])
    {
        assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }
}

#[test]
fn starting_at_the_fixed_point_stops_at_step_one() {
    let (cell, x) = contraction(11, 4, 0.5);
    let zs = affine_fixed_point(&cell, &x);
    for method in [SolverMethod::Naive, SolverMethod::Anderson, SolverMethod::Broyden] {
        let tr = solve_model(&cell, &x, &zs, &SolverConfig::new(method, 50).with_tol(1e-9)).unwrap();
        assert_eq!(tr.steps(), 1, "{method}");
        assert!(tr.final_residuals().iter().all(|r| *r <= 1e-9));
    }
}

#[test]
fn broyden_solves_affine_root_in_two_steps() {
    // f(z) = 1 so g(z) = 1 - z; root at 1.
    let cfg = SolverConfig::broyden(10).with_tol(1e-12);
    let tr = broyden_solve(|z: &Tensor| Ok(z.map(|_| 1.0)), &scalar(0.0), &cfg).unwrap();
    assert!(tr.steps() <= 2);
    assert!((tr.final_state.item() - 1.0).abs() < 1e-12);
}

#[test]
fn rotation_shrink_agrees_across_solvers() {
    let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
    let a = Tensor::new(vec![2, 2], vec![0.9 * c, -0.9 * s, 0.9 * s, 0.9 * c]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
    let cell = AffineCell::new(a, b, Tensor::from_vec(vec![0.2, 0.1])).unwrap();
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let want = affine_fixed_point(&cell, &x);
    let z0 = Tensor::zeros(&[1, 2]);
    let naive = solve_model(&cell, &x, &z0, &SolverConfig::naive(1000).with_tol(1e-12)).unwrap();
    let broy = solve_model(&cell, &x, &z0, &SolverConfig::broyden(100).with_tol(1e-12)).unwrap();
    assert_eq!(naive.termination, Termination::Converged);
    assert_eq!(broy.termination, Termination::Converged);
    assert!(naive.final_state.max_abs_diff(&broy.final_state) < 1e-6);
    assert!(broy.final_state.max_abs_diff(&want) < 1e-8);
}

#[test]
fn dispatch_matches_direct_calls() {
    let cfg = SolverConfig::naive(30).recording();
    let a = solve(halve_toward_one, &scalar(0.0), &cfg).unwrap();
    let b = fixed_point_iterate(halve_toward_one, &scalar(0.0), &cfg).unwrap();
    assert_eq!(a.residuals, b.residuals);
    assert_eq!(a.final_state, b.final_state);

    let (cell, x) = contraction(5, 4, 0.6);
    let map = CellMap::new(&cell, &x).unwrap();
    let z0 = Tensor::zeros(&[4, 4]);
    let cfg = SolverConfig::anderson(40);
    let a = solve(|z| map.apply(z), &z0, &cfg).unwrap();
    let b = anderson_solve(|z| map.apply(z), &z0, &cfg).unwrap();
    assert_eq!(a.residuals, b.residuals);
    assert_eq!(a.final_state, b.final_state);

    assert!(matches!("newton".parse::<SolverMethod>(), Err(Error::Config(_))));
}

#[test]
fn pure_rotation_plateaus_without_divergence() {
    let a = Tensor::new(vec![2, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap();
    let cell = AffineCell::new(a, Tensor::zeros(&[2, 1]), Tensor::zeros(&[2])).unwrap();
    let x = Tensor::zeros(&[1, 1]);
    let z0 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let tr = solve_model(&cell, &x, &z0, &SolverConfig::naive(100).with_tol(1e-6)).unwrap();
    assert_eq!(tr.termination, Termination::BudgetExhausted);
    let r = tr.final_residuals()[0];
    assert!((r - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn per_example_stopping_freezes_finished_rows() {
    // Row 0 starts at the fixed point, row 1 does not.
    let z0 = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
    let cfg = SolverConfig::naive(100).with_tol(1e-8);
    let tr = fixed_point_iterate(halve_toward_one, &z0, &cfg).unwrap();
    assert_eq!(tr.status[0], ExampleStatus::Converged { step: 1 });
    assert!(matches!(tr.status[1], ExampleStatus::Converged { step } if step > 20));
    assert!(tr.residuals.iter().all(|row| row[0] == 0.0));
    assert_eq!(tr.residuals.len(), tr.steps());
}

#[test]
fn config_validation() {
    assert!(SolverConfig::naive(0).validate().is_err());
    assert!(SolverConfig::anderson(2).with_memory(3).validate().is_err());
    assert!(SolverConfig::naive(5).with_tol(-1.0).validate().is_err());
}

#[test]
fn trace_csv_has_row_per_example_and_step() {
    let z0 = Tensor::zeros(&[3, 1]);
    let tr = fixed_point_iterate(halve_toward_one, &z0, &SolverConfig::naive(4)).unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 4);
    assert!(text.starts_with("example,step,residual"));
}
