use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cells::ParamGrads;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    /// Global L2 clip threshold; `None` disables clipping.
    #[serde(default = "clip")]
    pub clip_norm: Option<f64>,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}
fn clip() -> Option<f64> {
    Some(1.0)
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
            clip_norm: clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Adam moments for a named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Global L2 norm over every tensor.
pub fn global_norm(grads: &ParamGrads) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    /// Clips to the global-norm threshold, then applies one bias-corrected
    /// Adam update at learning rate `lr`. Non-finite gradients reject the
    /// step and leave parameters and state untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &ParamGrads,
        lr: f64,
    ) -> Result<StepInfo> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        let grad_norm = global_norm(grads);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm {grad_norm}, step rejected"
            )));
        }
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => Some(c / grad_norm),
            _ => None,
        };
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("moment exists").data_mut();
            let v = self.v.get_mut(name).expect("moment exists").data_mut();
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = match scale {
                    Some(s) => gi * s,
                    None => *gi,
                };
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepInfo {
            grad_norm,
            clipped: scale.is_some(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = single(3.0);
        let mut st = AdamState::new(AdamConfig::new(0.1), &p).unwrap();
        st.step(&mut p, &single(1.0), 0.1).unwrap();
        let before = p["w"].item();
        let m1 = st.m["w"].item();
        st.step(&mut p, &single(0.0), 0.1).unwrap();
        assert!(st.m["w"].item().abs() < m1.abs());
        // m decays by beta1 but stays nonzero, so the parameter still moves;
        // from a fresh state a zero gradient does nothing.
        let mut fresh = single(3.0);
        let mut st2 = AdamState::new(AdamConfig::new(0.1), &fresh).unwrap();
        st2.step(&mut fresh, &single(0.0), 0.1).unwrap();
        assert_eq!(fresh["w"].item(), 3.0);
        assert!(before != 3.0);
    }

    #[test]
    fn clipping_halves_a_norm_two_gradient() {
        let p0 = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(vec![0.0])),
            ("b".to_string(), Tensor::from_vec(vec![0.0])),
        ]);
        let g = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(vec![2.0f64.sqrt()])),
            ("b".to_string(), Tensor::from_vec(vec![2.0f64.sqrt()])),
        ]);
        let mut p = p0.clone();
        let mut st = AdamState::new(AdamConfig::new(0.1), &p).unwrap();
        let info = st.step(&mut p, &g, 0.1).unwrap();
        assert!(info.clipped);
        assert!((info.grad_norm - 2.0).abs() < 1e-15);
        let expect = 0.1 * 2.0f64.sqrt() * 0.5;
        assert!((st.m["a"].item() - expect).abs() < 1e-15);
    }

    #[test]
    fn infinite_threshold_is_bitwise_unclipped() {
        let mut a = single(1.0);
        let mut b = single(1.0);
        let mut cfg = AdamConfig::new(0.01);
        cfg.clip_norm = Some(f64::INFINITY);
        let mut sa = AdamState::new(cfg, &a).unwrap();
        let mut cfg = AdamConfig::new(0.01);
        cfg.clip_norm = None;
        let mut sb = AdamState::new(cfg, &b).unwrap();
        for i in 0..50 {
            let g = single(5.0 * (i as f64).sin());
            sa.step(&mut a, &g, 0.01).unwrap();
            sb.step(&mut b, &g, 0.01).unwrap();
        }
        assert_eq!(a["w"].item().to_bits(), b["w"].item().to_bits());
    }

    #[test]
    fn quadratic_converges() {
        let mut p = single(1.0);
        let mut cfg = AdamConfig::new(0.1);
        cfg.clip_norm = None;
        let mut st = AdamState::new(cfg, &p).unwrap();
        for _ in 0..500 {
            let g = single(2.0 * p["w"].item());
            st.step(&mut p, &g, 0.1).unwrap();
        }
        assert!(p["w"].item().abs() < 1e-3, "{}", p["w"].item());
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = single(1.0);
        let mut st = AdamState::new(AdamConfig::new(0.1), &p).unwrap();
        let before = st.clone();
        let err = st.step(&mut p, &single(f64::NAN), 0.1).unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(st, before);
        assert_eq!(p["w"].item(), 1.0);
    }
}
