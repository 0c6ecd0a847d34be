use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::probit;

/// Least-squares line `probit(acc) = slope * probit(aa) + intercept`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    pub n: usize,
    /// Residual standard deviation (n - 2 degrees of freedom; 0 when n = 2).
    pub residual_std: f64,
}

impl TrendFit {
    /// Whether a point lies inside the fit's 95% residual band.
    pub fn within_band(&self, aa: f64, accuracy: f64) -> bool {
        let pred = self.slope * probit(aa) + self.intercept;
        (probit(accuracy) - pred).abs() <= 1.96 * self.residual_std
    }
}

/// Ordinary least squares of `y` on `x` with Pearson r.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<TrendFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Config("x and y lengths differ".into()));
    }
    if n < 3 {
        return Err(Error::Config(format!(
            "a trend fit needs at least 3 points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Config("trend fit got non-finite points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 1e-24 * (1.0 + mx * mx) * n as f64 {
        return Err(Error::Config("regressor is constant; trend fit refused".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let pearson_r = if syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    Ok(TrendFit {
        slope,
        intercept,
        pearson_r,
        n,
        residual_std: (sse / (n - 2) as f64).sqrt(),
    })
}

/// Fit on probit axes of `(aa, accuracy)` points; both are capped first.
pub fn correlate(points: &[(f64, f64)]) -> Result<TrendFit> {
    let x: Vec<f64> = points.iter().map(|p| probit(p.0)).collect();
    let y: Vec<f64> = points.iter().map(|p| probit(p.1)).collect();
    linear_fit(&x, &y)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // Ties share their average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson r of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Config("spearman needs at least 3 paired points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Config("spearman got non-finite points".into()));
    }
    Ok(linear_fit(&ranks(x), &ranks(y))?.pearson_r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn perfect_monotone_is_one() {
        let x = [1.0, 2.0, 5.0, 9.0];
        let y = [0.1, 0.4, 0.5, 100.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
    }
}
