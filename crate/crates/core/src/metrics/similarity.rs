use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKernel {
    Cosine,
    Gaussian,
    Laplacian,
    InvMultiquadric,
}

impl fmt::Display for SimilarityKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKernel::Cosine => "cosine",
            SimilarityKernel::Gaussian => "gaussian",
            SimilarityKernel::Laplacian => "laplacian",
            SimilarityKernel::InvMultiquadric => "inv_multiquadric",
        })
    }
}

impl FromStr for SimilarityKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimilarityKernel::Cosine),
            "gaussian" => Ok(SimilarityKernel::Gaussian),
            "laplacian" => Ok(SimilarityKernel::Laplacian),
            "inv_multiquadric" | "inverse_multiquadric" => Ok(SimilarityKernel::InvMultiquadric),
            other => Err(Error::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kernel: SimilarityKernel,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    5000.0
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kernel: SimilarityKernel::Cosine,
            eps: default_eps(),
        }
    }
}

impl KernelConfig {
    pub fn new(kernel: SimilarityKernel, eps: f64) -> Self {
        Self { kernel, eps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("kernel eps {} must be positive", self.eps)));
        }
        Ok(())
    }

    /// Similarity of two flattened states; `None` when either has zero norm
    /// or a non-finite entry.
    pub fn score(&self, a: &[f64], b: &[f64]) -> Option<f64> {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
            return None;
        }
        let s = match self.kernel {
            SimilarityKernel::Cosine => {
                let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                c.clamp(-1.0, 1.0)
            }
            k => {
                let r = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x / na - y / nb).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let er = self.eps * r;
                match k {
                    SimilarityKernel::Gaussian => (-(er * er)).exp(),
                    SimilarityKernel::Laplacian => (-er.abs()).exp(),
                    _ => 1.0 / (1.0 + er * er).sqrt(),
                }
            }
        };
        Some(s)
    }
}

/// Scores each `(z1, z2)` pair.
pub fn aa_score_kernel(pairs: &[(Vec<f64>, Vec<f64>)], cfg: &KernelConfig) -> Result<Vec<Option<f64>>> {
    cfg.validate()?;
    Ok(pairs.iter().map(|(a, b)| cfg.score(a, b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_directions_score_one() {
        for k in [
            SimilarityKernel::Cosine,
            SimilarityKernel::Gaussian,
            SimilarityKernel::Laplacian,
            SimilarityKernel::InvMultiquadric,
        ] {
            let s = KernelConfig::new(k, 5000.0).score(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
            assert!((s - 1.0).abs() < 1e-12, "{k}");
        }
    }

    #[test]
    fn opposite_vectors() {
        let c = KernelConfig::new(SimilarityKernel::Cosine, 5000.0);
        assert_eq!(c.score(&[1.0, 0.0], &[-3.0, 0.0]).unwrap(), -1.0);
        let g = KernelConfig::new(SimilarityKernel::Gaussian, 5000.0);
        assert_eq!(g.score(&[1.0, 0.0], &[-3.0, 0.0]).unwrap(), (-(1e4f64).powi(2)).exp());
    }

    #[test]
    fn zero_norm_is_undefined() {
        assert!(KernelConfig::default().score(&[0.0, 0.0], &[1.0, 0.0]).is_none());
    }
}
