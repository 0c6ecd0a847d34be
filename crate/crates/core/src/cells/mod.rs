//! Weight-tied, input-injected cells `f(x, z)` plus the encoder and readout
//! around them.
//!
//! A model registers its parameters once per tape through [`Model::bind`];
//! every depth iteration then reuses the same bound variables, so gradients
//! from all iterations accumulate on a single parameter set.

mod affine;
mod conv;
mod fc;
mod params;

use std::collections::BTreeMap;

pub use affine::AffineCell;
pub use params::{Architecture, CellParams, CellSpec};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Parameter leaves registered on one tape, plus derived weights (weight-norm
/// outputs, transposes) computed once per bind.
#[derive(Debug, Default, Clone)]
pub struct Bound {
    leaves: Vec<(String, Var)>,
    derived: BTreeMap<String, Var>,
}

impl Bound {
    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves
            .iter()
            .find_map(|(n, v)| (n == name).then_some(*v))
    }

    /// The effective tensor named `name`: a derived weight when one was
    /// registered, otherwise the raw leaf.
    pub fn get(&self, name: &str) -> Var {
        self.derived
            .get(name)
            .copied()
            .or_else(|| self.leaf(name))
            .unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    pub(crate) fn push_leaf(&mut self, name: &str, v: Var) {
        self.leaves.push((name.to_string(), v));
    }

    pub(crate) fn set_derived(&mut self, name: &str, v: Var) {
        self.derived.insert(name.to_string(), v);
    }

    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }

    /// Gradient for every bound leaf; leaves the loss does not reach get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Grads) -> ParamGrads {
        self.leaves
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// An equilibrium model: encoder, weight-tied cell and readout.
pub trait Model {
    /// Registers every trainable tensor on the tape as a parameter leaf.
    fn bind(&self, tape: &mut Tape) -> Result<Bound>;

    /// Like [`Model::bind`] but as constants, for untraced evaluation.
    fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound>;

    /// Projects the raw input to the injection tensor.
    fn encode(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var>;

    /// One cell application `f(x, z)`.
    fn step(&self, tape: &mut Tape, bound: &Bound, injected: Var, z: Var) -> Result<Var>;

    /// Maps a hidden state to task outputs.
    fn readout(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var>;

    /// Hidden-state shape for a raw input batch.
    fn state_shape(&self, x: &Tensor) -> Result<Vec<usize>>;

    /// Current parameter values, keyed like the gradients.
    fn parameters(&self) -> &BTreeMap<String, Tensor>;
}

/// Untraced encoder output.
pub fn inject<M: Model + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let v = model.encode(&mut tape, &bound, x)?;
    Ok(tape.value(v).clone())
}

/// Untraced single cell application on a precomputed injection.
pub fn apply_cell<M: Model + ?Sized>(model: &M, injected: &Tensor, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let inj = tape.constant(injected.clone());
    let zv = tape.constant(z.clone());
    let out = model.step(&mut tape, &bound, inj, zv)?;
    Ok(tape.value(out).clone())
}

/// Untraced readout.
pub fn read_out<M: Model + ?Sized>(model: &M, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let zv = tape.constant(z.clone());
    let out = model.readout(&mut tape, &bound, zv)?;
    Ok(tape.value(out).clone())
}

/// Zero hidden state for an input batch.
pub fn zero_state<M: Model + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros(&model.state_shape(x)?))
}

/// The fixed-point map `z -> f(x, z)` for one input batch.
pub struct CellMap<'a, M: Model + ?Sized> {
    model: &'a M,
    injected: Tensor,
}

impl<'a, M: Model + ?Sized> CellMap<'a, M> {
    pub fn new(model: &'a M, x: &Tensor) -> Result<Self> {
        Ok(Self {
            model,
            injected: inject(model, x)?,
        })
    }

    pub fn injected(&self) -> &Tensor {
        &self.injected
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        apply_cell(self.model, &self.injected, z)
    }
}
