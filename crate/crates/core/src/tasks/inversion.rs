use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Matrices with prescribed condition numbers and their exact inverses.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionBatch {
    /// `(count, dim, dim)` clean matrices.
    pub a: Tensor,
    /// `(count, dim, dim)` inverses.
    pub target: Tensor,
    /// Requested condition number per matrix.
    pub kappas: Vec<f64>,
    pub dim: usize,
}

impl InversionBatch {
    pub fn count(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            a: self.a.select_rows(idx),
            target: self.target.select_rows(idx),
            kappas: idx.iter().map(|&i| self.kappas[i]).collect(),
            dim: self.dim,
        }
    }

    /// Network inputs: the matrices plus fresh Gaussian noise of scale
    /// `noise_scale`. Targets stay clean.
    pub fn noisy_inputs<R: Rng + ?Sized>(&self, noise_scale: f64, rng: &mut R) -> Tensor {
        if noise_scale == 0.0 {
            return self.a.clone();
        }
        let mut out = self.a.clone();
        for v in out.data_mut() {
            *v += noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Singular values `kappa^(-i/(d-1))`: largest 1, smallest `1/kappa`.
pub fn log_spaced_singular_values(d: usize, kappa: f64) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d)
        .map(|i| kappa.powf(-(i as f64) / (d - 1) as f64))
        .collect()
}

fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// `A = U diag(sigma) V^T` with `kappa ~ U[lo, hi]` per matrix.
pub fn gen_inversion(count: usize, dim: usize, cond_range: (f64, f64), seed: u64) -> Result<InversionBatch> {
    let (lo, hi) = cond_range;
    if !(lo >= 1.0) || !(hi >= lo) || !hi.is_finite() {
        return Err(Error::Config(format!(
            "condition range [{lo}, {hi}] needs 1 <= lo <= hi"
        )));
    }
    if count == 0 || dim == 0 {
        return Err(Error::Config("count and dim must be positive".into()));
    }
    if dim == 1 && hi > 1.0 {
        return Err(Error::Config("a 1x1 matrix has condition number 1".into()));
    }
    let mut rng = seeded(seed);
    let mut a = Vec::with_capacity(count * dim * dim);
    let mut t = Vec::with_capacity(count * dim * dim);
    let mut kappas = Vec::with_capacity(count);
    for _ in 0..count {
        let kappa = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let sigma = log_spaced_singular_values(dim, kappa);
        let u = random_orthogonal(dim, &mut rng);
        let v = random_orthogonal(dim, &mut rng);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sigma.clone()));
        let s_inv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            dim,
            sigma.iter().map(|x| 1.0 / x),
        ));
        a.extend(to_rows(&(&u * s * v.transpose())));
        t.extend(to_rows(&(&v * s_inv * u.transpose())));
        kappas.push(kappa);
    }
    Ok(InversionBatch {
        a: Tensor::new(vec![count, dim, dim], a)?,
        target: Tensor::new(vec![count, dim, dim], t)?,
        kappas,
        dim,
    })
}

/// Mean over all entries of `(pred - A^-1)^2`, with the inverse computed
/// densely from `a`.
pub fn inversion_error(pred: &Tensor, a: &Tensor) -> Result<f64> {
    let s = a.shape();
    if s.len() != 3 || s[1] != s[2] || pred.shape() != s {
        return Err(Error::dim(
            "inversion_error",
            format!("pred {:?} vs matrices {s:?}", pred.shape()),
        ));
    }
    let d = s[1];
    let mut total = 0.0;
    for i in 0..s[0] {
        let m = DMatrix::from_row_slice(d, d, a.row(i));
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Numeric(format!("matrix {i} is singular")))?;
        let p = pred.row(i);
        for r in 0..d {
            for c in 0..d {
                total += (p[r * d + c] - inv[(r, c)]).powi(2);
            }
        }
    }
    Ok(total / pred.numel() as f64)
}

/// Mean squared error against stored targets, per example.
pub fn per_example_mse(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    pred.expect_same_shape(target, "mse")?;
    let n = pred.row_len();
    Ok((0..pred.shape()[0])
        .map(|i| {
            pred.row(i)
                .iter()
                .zip(target.row(i))
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .collect())
}
