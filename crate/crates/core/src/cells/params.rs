use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cells::{conv, fc, Bound, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// 1-D convolutional residual cell over `(batch, channels, length)` states.
    Conv1dResnet,
    /// Fully connected residual cell over `(batch, width)` states.
    FcResnet,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Conv1dResnet => "conv1d_resnet",
            Architecture::FcResnet => "fc_resnet",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1d_resnet" => Ok(Architecture::Conv1dResnet),
            "fc_resnet" => Ok(Architecture::FcResnet),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Architecture descriptor. Shapes of every parameter follow from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub architecture: Architecture,
    /// Hidden channels (conv) or hidden units (fc).
    #[serde(default = "default_width")]
    pub width: usize,
    /// Residual blocks per cell application.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Conv kernel width; ignored by the fc cell.
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub weight_norm: bool,
    #[serde(default = "yes")]
    pub input_injection: bool,
    /// Layer normalization after each residual block (fc cell only).
    #[serde(default)]
    pub layer_norm: bool,
    /// Input channels for the conv cell, matrix side length for the fc cell.
    #[serde(default = "one")]
    pub input_dim: usize,
    /// Classes per position for the conv readout.
    #[serde(default = "two")]
    pub classes: usize,
}

fn default_width() -> usize {
    64
}
fn default_blocks() -> usize {
    2
}
fn default_kernel() -> usize {
    3
}
fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}

impl CellSpec {
    pub fn prefix_sum(width: usize) -> Self {
        Self {
            architecture: Architecture::Conv1dResnet,
            width,
            blocks: 2,
            kernel_size: 3,
            weight_norm: false,
            input_injection: true,
            layer_norm: false,
            input_dim: 1,
            classes: 2,
        }
    }

    pub fn matrix_inversion(dim: usize, width: usize) -> Self {
        Self {
            architecture: Architecture::FcResnet,
            width,
            blocks: 1,
            kernel_size: 3,
            weight_norm: false,
            input_injection: true,
            layer_norm: false,
            input_dim: dim,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "width, blocks and input_dim must be positive".into(),
            ));
        }
        if self.architecture == Architecture::Conv1dResnet {
            if self.kernel_size.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "kernel_size {} must be odd",
                    self.kernel_size
                )));
            }
            if self.classes < 2 {
                return Err(Error::Config("classes must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Every weight (subject to weight norm) with its shape, in a fixed order.
    pub(crate) fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self.architecture {
            Architecture::Conv1dResnet => conv::weight_shapes(self),
            Architecture::FcResnet => fc::weight_shapes(self),
        }
    }

    /// Biases and norm gains/shifts with their shapes and initial fill.
    pub(crate) fn other_shapes(&self) -> Vec<(String, Vec<usize>, f64)> {
        match self.architecture {
            Architecture::Conv1dResnet => conv::other_shapes(self),
            Architecture::FcResnet => fc::other_shapes(self),
        }
    }

    /// Names and shapes of every stored tensor.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, shape) in self.weight_shapes() {
            if self.weight_norm {
                out.push((format!("{name}_v"), shape.clone()));
                out.push((format!("{name}_g"), vec![shape[0]]));
            } else {
                out.push((name, shape));
            }
        }
        for (name, shape, _) in self.other_shapes() {
            out.push((name, shape));
        }
        out
    }
}

/// A weight-tied parameter set with its architecture descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    spec: CellSpec,
    tensors: BTreeMap<String, Tensor>,
}

impl CellParams {
    /// Kaiming-uniform fan-in weights (bound `1/sqrt(fan_in)`), zero biases,
    /// unit layer-norm gains. Weight-norm magnitudes start at the row norms
    /// so the effective weights equal the sampled directions.
    pub fn init<R: Rng + ?Sized>(spec: CellSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in spec.weight_shapes() {
            let fan_in: usize = shape[1..].iter().product();
            let w = Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), rng);
            if spec.weight_norm {
                let g: Vec<f64> = (0..shape[0])
                    .map(|r| {
                        let row = w.row(r);
                        row.iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .collect();
                tensors.insert(format!("{name}_v"), w);
                tensors.insert(format!("{name}_g"), Tensor::from_vec(g));
            } else {
                tensors.insert(name, w);
            }
        }
        for (name, shape, fill) in spec.other_shapes() {
            tensors.insert(name, Tensor::full(&shape, fill));
        }
        Ok(Self { spec, tensors })
    }

    /// Assembles parameters from stored tensors, checking names and shapes.
    pub fn from_tensors(spec: CellSpec, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.tensor_layout();
        if tensors.len() != layout.len() {
            return Err(Error::format(
                "cell parameters",
                format!("expected {} tensors, found {}", layout.len(), tensors.len()),
            ));
        }
        for (name, shape) in &layout {
            let t = tensors.get(name).ok_or_else(|| {
                Error::format("cell parameters", format!("missing tensor {name}"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "cell parameters",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::format("cell parameters", format!("{name} is not finite")));
            }
        }
        // Normalize sharing so later in-place updates never alias.
        for t in tensors.values_mut() {
            t.data_mut();
        }
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers leaves, then derives effective weights (weight norm).
    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut bound = Bound::default();
        for (name, t) in &self.tensors {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            bound.push_leaf(name, v);
        }
        if self.spec.weight_norm {
            for (name, _) in self.spec.weight_shapes() {
                let v = bound.get(&format!("{name}_v"));
                let g = bound.get(&format!("{name}_g"));
                let w = tape.weight_norm(v, g)?;
                bound.set_derived(&name, w);
            }
        }
        if self.spec.architecture == Architecture::FcResnet {
            fc::derive_transposes(&self.spec, tape, &mut bound)?;
        }
        Ok(bound)
    }
}

impl Model for CellParams {
    fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.bind_with(tape, true)
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        self.bind_with(tape, false)
    }

    fn encode(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
        match self.spec.architecture {
            Architecture::Conv1dResnet => conv::encode(&self.spec, tape, bound, x),
            Architecture::FcResnet => fc::encode(&self.spec, tape, bound, x),
        }
    }

    fn step(&self, tape: &mut Tape, bound: &Bound, injected: Var, z: Var) -> Result<Var> {
        match self.spec.architecture {
            Architecture::Conv1dResnet => conv::step(&self.spec, tape, bound, injected, z),
            Architecture::FcResnet => fc::step(&self.spec, tape, bound, injected, z),
        }
    }

    fn readout(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        match self.spec.architecture {
            Architecture::Conv1dResnet => conv::readout(tape, bound, z),
            Architecture::FcResnet => fc::readout(&self.spec, tape, bound, z),
        }
    }

    fn state_shape(&self, x: &Tensor) -> Result<Vec<usize>> {
        match self.spec.architecture {
            Architecture::Conv1dResnet => conv::state_shape(&self.spec, x),
            Architecture::FcResnet => fc::state_shape(&self.spec, x),
        }
    }

    fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }
}
