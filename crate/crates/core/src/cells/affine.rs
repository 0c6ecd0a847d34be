use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cells::{Bound, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Synthetic cell `z <- A z + B x + c` with an identity readout.
///
/// When `|A|_2 < 1` the map is a global contraction with the unique fixed
/// point `(I - A)^-1 (B x + c)`, which makes it the reference instance for
/// solver, gradient and path-independence checks.
#[derive(Clone, Debug)]
pub struct AffineCell {
    params: BTreeMap<String, Tensor>,
}

impl AffineCell {
    /// `a` is `(n, n)`, `b` is `(n, m)`, `c` is `(n)`.
    pub fn new(a: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let n = a.shape()[0];
        if a.shape() != [n, n] || b.rank() != 2 || b.shape()[0] != n || c.shape() != [n] {
            return Err(Error::dim(
                "affine_cell",
                format!(
                    "A {:?}, B {:?}, c {:?} are inconsistent",
                    a.shape(),
                    b.shape(),
                    c.shape()
                ),
            ));
        }
        let mut params = BTreeMap::new();
        params.insert("A".to_string(), a);
        params.insert("B".to_string(), b);
        params.insert("c".to_string(), c);
        Ok(Self { params })
    }

    /// Gaussian `A` rescaled to operator norm `norm`, Gaussian `B` and `c`.
    pub fn random<R: Rng + ?Sized>(n: usize, m: usize, norm: f64, rng: &mut R) -> Result<Self> {
        let g = Tensor::randn(&[n, n], rng);
        let mat = DMatrix::from_row_slice(n, n, g.data());
        let sigma_max = mat.singular_values().max();
        let a = g.scaled(norm / sigma_max);
        Self::new(a, Tensor::randn(&[n, m], rng), Tensor::randn(&[n], rng))
    }

    pub fn state_dim(&self) -> usize {
        self.params["A"].shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.params["B"].shape()[1]
    }

    pub fn a(&self) -> &Tensor {
        &self.params["A"]
    }

    pub fn b(&self) -> &Tensor {
        &self.params["B"]
    }

    pub fn c(&self) -> &Tensor {
        &self.params["c"]
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut bound = Bound::default();
        for (name, t) in &self.params {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            bound.push_leaf(name, v);
        }
        let at = tape.transpose(bound.get("A"))?;
        let bt = tape.transpose(bound.get("B"))?;
        bound.set_derived("A^T", at);
        bound.set_derived("B^T", bt);
        Ok(bound)
    }
}

impl Model for AffineCell {
    fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.bind_with(tape, true)
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        self.bind_with(tape, false)
    }

    fn encode(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
        self.state_shape(x)?;
        let xv = tape.constant(x.clone());
        let bx = tape.matmul(xv, bound.get("B^T"))?;
        tape.bias_add(bx, bound.get("c"))
    }

    fn step(&self, tape: &mut Tape, bound: &Bound, injected: Var, z: Var) -> Result<Var> {
        let az = tape.matmul(z, bound.get("A^T"))?;
        tape.add(az, injected)
    }

    fn readout(&self, _tape: &mut Tape, _bound: &Bound, z: Var) -> Result<Var> {
        Ok(z)
    }

    fn state_shape(&self, x: &Tensor) -> Result<Vec<usize>> {
        match x.shape() {
            [batch, m] if *m == self.input_dim() => Ok(vec![*batch, self.state_dim()]),
            s => Err(Error::dim(
                "affine_cell",
                format!("input must be (B, {}), got {s:?}", self.input_dim()),
            )),
        }
    }

    fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
}
