#![allow(dead_code)]

use deq_core::cells::AffineCell;
use deq_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

pub fn vecn(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// `(I - A)^-1 (B x_i + c)` for every row of `x`, by dense LU.
pub fn affine_fixed_point(cell: &AffineCell, x: &Tensor) -> Tensor {
    let a = mat(cell.a());
    let b = mat(cell.b());
    let c = vecn(cell.c().data());
    let n = a.nrows();
    let lu = (DMatrix::identity(n, n) - &a).lu();
    let mut out = Vec::new();
    for i in 0..x.shape()[0] {
        let rhs = &b * vecn(x.row(i)) + &c;
        out.extend(lu.solve(&rhs).expect("I - A is invertible").iter());
    }
    Tensor::new(vec![x.shape()[0], n], out).unwrap()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

use deq_core::autodiff::{Tape, Var};
use deq_core::cells::ParamGrads;
use std::sync::Arc;

pub fn flat(g: &ParamGrads) -> Vec<f64> {
    g.values().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn grads_rel_diff(a: &ParamGrads, b: &ParamGrads) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    rel_diff(&flat(a), &flat(b))
}

/// `0.5 * sum |out - target|^2` on the tape.
pub fn quadratic_loss(target: Tensor) -> impl Fn(&mut Tape, Var) -> deq_core::Result<Var> {
    move |tape: &mut Tape, out: Var| {
        let t = tape.constant(target.clone());
        let d = tape.sub(out, t)?;
        let s = tape.dot(d, d)?;
        tape.scale(s, 0.5)
    }
}

pub fn ce_loss(labels: Vec<usize>) -> impl Fn(&mut Tape, Var) -> deq_core::Result<Var> {
    let labels: Arc<[usize]> = labels.into();
    move |tape: &mut Tape, out: Var| tape.softmax_cross_entropy(out, labels.clone())
}

/// Gradient of `0.5 sum_i |z_T,i - t_i|^2` for `z_{s+1} = A z_s + B x + c`,
/// counting only the contributions of the last `traced` steps. Computed by
/// explicit forward and adjoint recursions in dense linear algebra.
pub fn affine_unrolled_grads(
    cell: &AffineCell,
    x: &Tensor,
    z0: &Tensor,
    target: &Tensor,
    depth: usize,
    traced: usize,
) -> ParamGrads {
    let a = mat(cell.a());
    let b = mat(cell.b());
    let c = vecn(cell.c().data());
    let n = a.nrows();
    let m = b.ncols();
    let mut da = DMatrix::<f64>::zeros(n, n);
    let mut db = DMatrix::<f64>::zeros(n, m);
    let mut dc = DVector::<f64>::zeros(n);
    for i in 0..x.shape()[0] {
        let xi = vecn(x.row(i));
        let inj = &b * &xi + &c;
        let mut zs = vec![vecn(z0.row(i))];
        for _ in 0..depth {
            let next = &a * zs.last().unwrap() + &inj;
            zs.push(next);
        }
        let mut u = zs[depth].clone() - vecn(target.row(i));
        for t in (depth - traced + 1..=depth).rev() {
            da += &u * zs[t - 1].transpose();
            db += &u * xi.transpose();
            dc += &u;
            u = a.transpose() * u;
        }
    }
    to_grads(da, db, dc)
}

/// Closed-form implicit gradient of the same loss at the exact fixed point.
pub fn affine_implicit_grads(cell: &AffineCell, x: &Tensor, target: &Tensor) -> ParamGrads {
    let a = mat(cell.a());
    let b = mat(cell.b());
    let n = a.nrows();
    let zs = affine_fixed_point(cell, x);
    let lu = (DMatrix::identity(n, n) - a.transpose()).lu();
    let mut da = DMatrix::<f64>::zeros(n, n);
    let mut db = DMatrix::<f64>::zeros(n, b.ncols());
    let mut dc = DVector::<f64>::zeros(n);
    for i in 0..x.shape()[0] {
        let z = vecn(zs.row(i));
        let g = &z - vecn(target.row(i));
        let u = lu.solve(&g).unwrap();
        da += &u * z.transpose();
        db += &u * vecn(x.row(i)).transpose();
        dc += &u;
    }
    to_grads(da, db, dc)
}

fn to_grads(da: DMatrix<f64>, db: DMatrix<f64>, dc: DVector<f64>) -> ParamGrads {
    let t = |m: &DMatrix<f64>| {
        let rows: Vec<f64> = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)])
            .collect();
        Tensor::new(vec![m.nrows(), m.ncols()], rows).unwrap()
    };
    let mut g = ParamGrads::new();
    g.insert("A".into(), t(&da));
    g.insert("B".into(), t(&db));
    g.insert("c".into(), Tensor::from_vec(dc.iter().copied().collect()));
    g
}

use deq_core::autodiff::Kernel;
use rand::Rng;

/// One randomly drawn input set for every autodiff kernel. ReLU inputs are
/// kept away from the kink so central differences stay valid.
pub fn kernel_cases(seed: u64) -> Vec<(Kernel, Vec<Tensor>)> {
    let mut r = rng(seed);
    let mut n = |shape: &[usize]| Tensor::randn(shape, &mut r);
    let away_from_zero = |t: Tensor| t.map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v });
    let positive = |t: Tensor| t.map(|v| v.abs() + 0.5);
    let mut cases = vec![
        (Kernel::MatMul, vec![n(&[3, 4]), n(&[4, 2])]),
        (Kernel::Conv1d, vec![n(&[2, 3, 5]), n(&[4, 3, 3]), n(&[4])]),
        (Kernel::Relu, vec![away_from_zero(n(&[3, 5]))]),
        (Kernel::Add, vec![n(&[2, 3]), n(&[2, 3])]),
        (Kernel::Scale(-1.7), vec![n(&[4])]),
        (Kernel::BiasAdd, vec![n(&[2, 3, 4]), n(&[3])]),
        (Kernel::ReduceMean, vec![n(&[3, 3])]),
        (Kernel::WeightNormApply, vec![n(&[4, 3]), positive(n(&[4]))]),
        (Kernel::L2Norm, vec![n(&[6])]),
        (Kernel::Dot, vec![n(&[2, 4]), n(&[2, 4])]),
        (Kernel::CosineSimilarity, vec![n(&[5]), n(&[5])]),
        (Kernel::LayerNorm, vec![n(&[3, 5]), n(&[5]), n(&[5])]),
        (Kernel::Reshape(vec![3, 4]), vec![n(&[2, 6])]),
        (Kernel::Transpose, vec![n(&[3, 4])]),
    ];
    let labels: Vec<usize> = (0..8).map(|_| r.gen_range(0..3)).collect();
    cases.push((
        Kernel::SoftmaxCrossEntropy(labels.into()),
        vec![Tensor::randn(&[2, 3, 4], &mut r)],
    ));
    cases
}
