//! Matrix-inversion cell: fully connected residual blocks over a flat state.

use crate::autodiff::{Tape, Var};
use crate::cells::{Bound, CellSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn linear_names(spec: &CellSpec) -> Vec<String> {
    let mut out = vec!["encoder.weight".to_string()];
    for b in 0..spec.blocks {
        out.push(format!("block{b}.fc1.weight"));
        out.push(format!("block{b}.fc2.weight"));
    }
    out.push("readout.weight".to_string());
    out
}

pub(crate) fn weight_shapes(spec: &CellSpec) -> Vec<(String, Vec<usize>)> {
    let (w, d2) = (spec.width, spec.input_dim * spec.input_dim);
    linear_names(spec)
        .into_iter()
        .map(|name| {
            let shape = match name.as_str() {
                "encoder.weight" => vec![w, d2],
                "readout.weight" => vec![d2, w],
                _ => vec![w, w],
            };
            (name, shape)
        })
        .collect()
}

pub(crate) fn other_shapes(spec: &CellSpec) -> Vec<(String, Vec<usize>, f64)> {
    let (w, d2) = (spec.width, spec.input_dim * spec.input_dim);
    let mut out = vec![("encoder.bias".to_string(), vec![w], 0.0)];
    for b in 0..spec.blocks {
        out.push((format!("block{b}.fc1.bias"), vec![w], 0.0));
        out.push((format!("block{b}.fc2.bias"), vec![w], 0.0));
        if spec.layer_norm {
            out.push((format!("block{b}.norm.gain"), vec![w], 1.0));
            out.push((format!("block{b}.norm.shift"), vec![w], 0.0));
        }
    }
    out.push(("readout.bias".to_string(), vec![d2], 0.0));
    out
}

/// Stores `W^T` for every linear weight so each application is one matmul.
pub(crate) fn derive_transposes(spec: &CellSpec, tape: &mut Tape, bound: &mut Bound) -> Result<()> {
    for name in linear_names(spec) {
        let w = bound.get(&name);
        let wt = tape.transpose(w)?;
        bound.set_derived(&format!("{name}^T"), wt);
    }
    Ok(())
}

fn linear(tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.get(&format!("{prefix}.weight^T")))?;
    tape.bias_add(y, bound.get(&format!("{prefix}.bias")))
}

pub(crate) fn state_shape(spec: &CellSpec, x: &Tensor) -> Result<Vec<usize>> {
    let d = spec.input_dim;
    match x.shape() {
        [b, r, c] if *r == d && *c == d => Ok(vec![*b, spec.width]),
        [b, n] if *n == d * d => Ok(vec![*b, spec.width]),
        s => Err(Error::dim(
            "encode_input",
            format!("expected (B, {d}, {d}) matrices, got {s:?}"),
        )),
    }
}

pub(crate) fn encode(spec: &CellSpec, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
    let batch = state_shape(spec, x)?[0];
    let flat = x.reshape(&[batch, spec.input_dim * spec.input_dim])?;
    let xv = tape.constant(flat);
    linear(tape, bound, xv, "encoder")
}

pub(crate) fn step(
    spec: &CellSpec,
    tape: &mut Tape,
    bound: &Bound,
    injected: Var,
    z: Var,
) -> Result<Var> {
    let zs = tape.value(z).shape();
    if zs.len() != 2 || zs[1] != spec.width || zs != tape.value(injected).shape() {
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
        let r = linear(tape, bound, h, &format!("block{b}.fc1"))?;
        let r = tape.relu(r)?;
        let r = linear(tape, bound, r, &format!("block{b}.fc2"))?;
        let s = tape.add(h, r)?;
        h = tape.relu(s)?;
        if spec.layer_norm {
            h = tape.layer_norm(
                h,
                bound.get(&format!("block{b}.norm.gain")),
                bound.get(&format!("block{b}.norm.shift")),
            )?;
        }
    }
    Ok(h)
}

pub(crate) fn readout(spec: &CellSpec, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
    let batch = tape.value(z).shape()[0];
    let d = spec.input_dim;
    let y = linear(tape, bound, z, "readout")?;
    tape.reshape(y, &[batch, d, d])
}
