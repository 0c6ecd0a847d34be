//! Prefix-sum cell: a stack of residual blocks of two width-`K` convolutions,
//! with the encoded input added to the state before the first block.

use crate::autodiff::{Tape, Var};
use crate::cells::{Bound, CellSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn weight_shapes(spec: &CellSpec) -> Vec<(String, Vec<usize>)> {
    let (w, k) = (spec.width, spec.kernel_size);
    let mut out = vec![("encoder.weight".to_string(), vec![w, spec.input_dim, k])];
    for b in 0..spec.blocks {
        for c in 1..=2 {
            out.push((format!("block{b}.conv{c}.weight"), vec![w, w, k]));
        }
    }
    out.push(("readout.weight".to_string(), vec![spec.classes, w, k]));
    out
}

pub(crate) fn other_shapes(spec: &CellSpec) -> Vec<(String, Vec<usize>, f64)> {
    let w = spec.width;
    let mut out = vec![("encoder.bias".to_string(), vec![w], 0.0)];
    for b in 0..spec.blocks {
        for c in 1..=2 {
            out.push((format!("block{b}.conv{c}.bias"), vec![w], 0.0));
        }
    }
    out.push(("readout.bias".to_string(), vec![spec.classes], 0.0));
    out
}

/// Accepts `(B, L)` single-channel inputs or `(B, C, L)`.
fn as_signal(spec: &CellSpec, x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [b, l] if spec.input_dim == 1 => x.reshape(&[*b, 1, *l]),
        [_, c, _] if *c == spec.input_dim => Ok(x.clone()),
        s => Err(Error::dim(
            "encode_input",
            format!("expected (B, L) or (B, {}, L) input, got {s:?}", spec.input_dim),
        )),
    }
}

pub(crate) fn state_shape(spec: &CellSpec, x: &Tensor) -> Result<Vec<usize>> {
    let s = as_signal(spec, x)?;
    Ok(vec![s.shape()[0], spec.width, s.shape()[2]])
}

pub(crate) fn encode(spec: &CellSpec, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
    let x = tape.constant(as_signal(spec, x)?);
    tape.conv1d(x, bound.get("encoder.weight"), bound.get("encoder.bias"))
}

pub(crate) fn step(
    spec: &CellSpec,
    tape: &mut Tape,
    bound: &Bound,
    injected: Var,
    z: Var,
) -> Result<Var> {
    let zs = tape.value(z).shape();
    if zs.len() != 3 || zs[1] != spec.width || zs != tape.value(injected).shape() {
        return Err(Error::dim(
            "cell_apply",
            format!(
                "state {:?} incompatible with injection {:?} at width {}",
                zs,
                tape.value(injected).shape(),
                spec.width
            ),
        ));
    }
    let mut h = if spec.input_injection {
        tape.add(z, injected)?
    } else {
        z
    };
    for b in 0..spec.blocks {
        let r = tape.conv1d(
            h,
            bound.get(&format!("block{b}.conv1.weight")),
            bound.get(&format!("block{b}.conv1.bias")),
        )?;
        let r = tape.relu(r)?;
        let r = tape.conv1d(
            r,
            bound.get(&format!("block{b}.conv2.weight")),
            bound.get(&format!("block{b}.conv2.bias")),
        )?;
        let s = tape.add(h, r)?;
        h = tape.relu(s)?;
    }
    Ok(h)
}

pub(crate) fn readout(tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
    tape.conv1d(z, bound.get("readout.weight"), bound.get("readout.bias"))
}
