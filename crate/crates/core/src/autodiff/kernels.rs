//! The closed kernel set: forward rules and vector-Jacobian products.
//!
//! Every kernel is a pure function of its input tensors. The tape calls
//! [`Kernel::forward`] while recording and [`Kernel::vjp`] while replaying
//! in reverse; gradient checks call both directly.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// `(m, k) x (k, n) -> (m, n)`.
    MatMul,
    /// Stride-1 zero-padded 1-D convolution: `x (B, Cin, L)`, `w (Cout, Cin, K)`,
    /// `b (Cout)` to `(B, Cout, L)`. `K` must be odd.
    Conv1d,
    Relu,
    Add,
    Scale(f64),
    /// Adds a per-channel bias along axis 1.
    BiasAdd,
    ReduceMean,
    /// Mean cross entropy over every `(example, position)` of `(B, C)` or
    /// `(B, C, L)` logits. Labels are class indices, row-major over `(B, L)`.
    SoftmaxCrossEntropy(Arc<[usize]>),
    /// `g_i * v_i / |v_i|` per leading-axis row of `v`.
    WeightNormApply,
    L2Norm,
    Dot,
    CosineSimilarity,
    /// Normalizes the last axis then applies a per-feature gain and shift.
    LayerNorm,
    Reshape(Vec<usize>),
    /// 2-D transpose.
    Transpose,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::MatMul => "matmul",
            Kernel::Conv1d => "conv1d",
            Kernel::Relu => "relu",
            Kernel::Add => "add",
            Kernel::Scale(_) => "scale",
            Kernel::BiasAdd => "bias_add",
            Kernel::ReduceMean => "reduce_mean",
            Kernel::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Kernel::WeightNormApply => "weight_norm_apply",
            Kernel::L2Norm => "l2_norm",
            Kernel::Dot => "dot",
            Kernel::CosineSimilarity => "cosine_similarity",
            Kernel::LayerNorm => "layer_norm",
            Kernel::Reshape(_) => "reshape",
            Kernel::Transpose => "transpose",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Kernel::Conv1d | Kernel::LayerNorm => 3,
            Kernel::MatMul
            | Kernel::Add
            | Kernel::BiasAdd
            | Kernel::WeightNormApply
            | Kernel::Dot
            | Kernel::CosineSimilarity => 2,
            _ => 1,
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        if inputs.len() != self.arity() {
            return Err(Error::dim(
                name,
                format!("expected {} inputs, got {}", self.arity(), inputs.len()),
            ));
        }
        let out = match self {
            Kernel::MatMul => matmul(inputs[0], inputs[1])?,
            Kernel::Conv1d => conv1d(inputs[0], inputs[1], inputs[2])?,
            Kernel::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
            Kernel::Add => {
                inputs[0].expect_same_shape(inputs[1], name)?;
                inputs[0].add(inputs[1])?
            }
            Kernel::Scale(c) => inputs[0].scaled(*c),
            Kernel::BiasAdd => bias_add(inputs[0], inputs[1])?,
            Kernel::ReduceMean => {
                let x = inputs[0];
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
            Kernel::SoftmaxCrossEntropy(labels) => softmax_ce(inputs[0], labels)?.0,
            Kernel::WeightNormApply => weight_norm(inputs[0], inputs[1])?,
            Kernel::L2Norm => Tensor::scalar(inputs[0].norm()),
            Kernel::Dot => {
                inputs[0].expect_same_shape(inputs[1], name)?;
                Tensor::scalar(inputs[0].dot(inputs[1]))
            }
            Kernel::CosineSimilarity => {
                inputs[0].expect_same_shape(inputs[1], name)?;
                let (a, b) = (inputs[0], inputs[1]);
                Tensor::scalar(a.dot(b) / (a.norm() * b.norm()))
            }
            Kernel::LayerNorm => layer_norm(inputs[0], inputs[1], inputs[2])?.0,
            Kernel::Reshape(shape) => inputs[0].reshape(shape)?,
            Kernel::Transpose => transpose(inputs[0])?,
        };
        if !out.all_finite() {
            return Err(Error::NonFinite { kernel: name });
        }
        Ok(out)
    }

    /// Pulls the output cotangent back to every input flagged in `needs`.
    pub fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        cot: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let grads = match self {
            Kernel::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = want(0).then(|| {
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, cot.data(), false, b.data(), true, &mut out);
                    Tensor::new(a.shape().to_vec(), out)
                });
                let db = want(1).then(|| {
                    let mut out = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, cot.data(), false, &mut out);
                    Tensor::new(b.shape().to_vec(), out)
                });
                vec![da.transpose()?, db.transpose()?]
            }
            Kernel::Conv1d => {
                let (dx, dw, db) = conv1d_vjp(inputs[0], inputs[1], cot, want(0), want(1), want(2));
                vec![dx, dw, db]
            }
            Kernel::Relu => {
                let g = output.zip_map(cot, |y, g| if y > 0.0 { g } else { 0.0 })?;
                vec![Some(g)]
            }
            Kernel::Add => vec![Some(cot.clone()), Some(cot.clone())],
            Kernel::Scale(c) => vec![Some(cot.scaled(*c))],
            Kernel::BiasAdd => {
                let db = want(1).then(|| bias_grad(inputs[0].shape(), cot));
                vec![Some(cot.clone()), db]
            }
            Kernel::ReduceMean => {
                let x = inputs[0];
                let g = cot.item() / x.numel() as f64;
                vec![Some(Tensor::full(x.shape(), g))]
            }
            Kernel::SoftmaxCrossEntropy(labels) => {
                let (_, probs) = softmax_ce(inputs[0], labels)?;
                let (batch, classes, len) = logit_dims(inputs[0])?;
                let n = (batch * len) as f64;
                let scale = cot.item() / n;
                let mut g = probs;
                for b in 0..batch {
                    for l in 0..len {
                        let y = labels[b * len + l];
                        g[b * classes * len + y * len + l] -= 1.0;
                    }
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::new(inputs[0].shape().to_vec(), g)?)]
            }
            Kernel::WeightNormApply => {
                let (dv, dg) = weight_norm_vjp(inputs[0], inputs[1], cot)?;
                vec![Some(dv), Some(dg)]
            }
            Kernel::L2Norm => {
                let x = inputs[0];
                let n = output.item();
                let s = if n > 0.0 { cot.item() / n } else { 0.0 };
                vec![Some(x.scaled(s))]
            }
            Kernel::Dot => {
                let g = cot.item();
                vec![Some(inputs[1].scaled(g)), Some(inputs[0].scaled(g))]
            }
            Kernel::CosineSimilarity => {
                let (a, b) = (inputs[0], inputs[1]);
                let (na, nb) = (a.norm(), b.norm());
                let c = output.item();
                let g = cot.item();
                let da = b.zip_map(a, |bv, av| g * (bv / (na * nb) - c * av / (na * na)))?;
                let db = a.zip_map(b, |av, bv| g * (av / (na * nb) - c * bv / (nb * nb)))?;
                vec![Some(da), Some(db)]
            }
            Kernel::LayerNorm => {
                let (dx, dgamma, dbeta) = layer_norm_vjp(inputs[0], inputs[1], cot)?;
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Kernel::Reshape(_) => vec![Some(cot.reshape(inputs[0].shape())?)],
            Kernel::Transpose => vec![Some(transpose(cot)?)],
        };
        Ok(grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| if want(i) { g } else { None })
            .collect())
    }
}

/// Evaluates one kernel outside any tape.
pub fn forward_kernel(kernel: &Kernel, inputs: &[&Tensor]) -> Result<Tensor> {
    kernel.forward(inputs)
}

/// `c = op(a) * op(b)` with `op(a)` of shape `(m, k)` and `op(b)` of shape `(k, n)`.
/// `c` is overwritten.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    gemm_acc(m, k, n, a, a_t, b, b_t, c, 0.0)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out);
    Tensor::new(vec![m, n], out)
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::dim("transpose", format!("rank-2 input required, got {:?}", a.shape())));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || b.rank() != 1 || x.shape()[1] != b.numel() {
        return Err(Error::dim(
            "bias_add",
            format!("bias {:?} does not match channels of {:?}", b.shape(), x.shape()),
        ));
    }
    let channels = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = x.data().to_vec();
    for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
        let bias = b.data()[chunk_idx % channels];
        chunk.iter_mut().for_each(|v| *v += bias);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn bias_grad(x_shape: &[usize], cot: &Tensor) -> Tensor {
    let channels = x_shape[1];
    let inner: usize = x_shape[2..].iter().product();
    let mut db = vec![0.0; channels];
    for (chunk_idx, chunk) in cot.data().chunks(inner).enumerate() {
        db[chunk_idx % channels] += chunk.iter().sum::<f64>();
    }
    Tensor::from_vec(db)
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(Error::dim(
            "conv1d",
            format!("expected (B,C,L) signal and (O,C,K) kernel, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wcin != cin {
        return Err(Error::dim("conv1d", format!("kernel expects {wcin} channels, signal has {cin}")));
    }
    if k % 2 == 0 {
        return Err(Error::dim("conv1d", format!("kernel width {k} must be odd")));
    }
    if b.rank() != 1 || b.numel() != cout {
        return Err(Error::dim("conv1d", format!("bias {:?} does not match {cout} outputs", b.shape())));
    }
    Ok((batch, cin, len, cout, k))
}

/// Unfolds one example `(Cin, L)` into `(Cin*K, L)` columns.
fn im2col(x: &[f64], cin: usize, len: usize, k: usize, col: &mut [f64]) {
    let pad = k / 2;
    for ci in 0..cin {
        let row_in = &x[ci * len..(ci + 1) * len];
        for kk in 0..k {
            let dst = &mut col[(ci * k + kk) * len..(ci * k + kk + 1) * len];
            for (l, d) in dst.iter_mut().enumerate() {
                let src = l as isize + kk as isize - pad as isize;
                *d = if src >= 0 && (src as usize) < len {
                    row_in[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im_add(col: &[f64], cin: usize, len: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    for ci in 0..cin {
        for kk in 0..k {
            let src = &col[(ci * k + kk) * len..(ci * k + kk + 1) * len];
            for (l, v) in src.iter().enumerate() {
                let dst = l as isize + kk as isize - pad as isize;
                if dst >= 0 && (dst as usize) < len {
                    dx[ci * len + dst as usize] += v;
                }
            }
        }
    }
}

fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, cin, len, cout, k) = conv_dims(x, w, b)?;
    let mut out = vec![0.0; batch * cout * len];
    let mut col = vec![0.0; cin * k * len];
    for bi in 0..batch {
        im2col(&x.data()[bi * cin * len..(bi + 1) * cin * len], cin, len, k, &mut col);
        let dst = &mut out[bi * cout * len..(bi + 1) * cout * len];
        for (co, row) in dst.chunks_mut(len).enumerate() {
            row.fill(b.data()[co]);
        }
        gemm_acc(cout, cin * k, len, w.data(), false, &col, false, dst, 1.0);
    }
    Tensor::new(vec![batch, cout, len], out)
}

#[allow(clippy::type_complexity)]
fn conv1d_vjp(
    x: &Tensor,
    w: &Tensor,
    cot: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let mut dx = need_x.then(|| vec![0.0; x.numel()]);
    let mut dw = need_w.then(|| vec![0.0; w.numel()]);
    let mut col = vec![0.0; cin * k * len];
    let mut dcol = vec![0.0; cin * k * len];
    for bi in 0..batch {
        let g = &cot.data()[bi * cout * len..(bi + 1) * cout * len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[bi * cin * len..(bi + 1) * cin * len], cin, len, k, &mut col);
            gemm_acc(cout, len, cin * k, g, false, &col, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(cin * k, cout, len, w.data(), true, g, false, &mut dcol);
            col2im_add(&dcol, cin, len, k, &mut dx[bi * cin * len..(bi + 1) * cin * len]);
        }
    }
    let db = need_b.then(|| bias_grad(cot.shape(), cot));
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape preserved")),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("shape preserved")),
        db,
    )
}

fn logit_dims(logits: &Tensor) -> Result<(usize, usize, usize)> {
    match logits.shape() {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, l] => Ok((*b, *c, *l)),
        s => Err(Error::dim(
            "softmax_cross_entropy",
            format!("logits must be (B,C) or (B,C,L), got {s:?}"),
        )),
    }
}

/// Returns the mean loss and the softmax probabilities laid out like the logits.
fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let (batch, classes, len) = logit_dims(logits)?;
    if labels.len() != batch * len {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for {} positions", labels.len(), batch * len),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    let x = logits.data();
    let mut probs = vec![0.0; x.len()];
    let mut total = 0.0;
    for b in 0..batch {
        let base = b * classes * len;
        for l in 0..len {
            let at = |c: usize| base + c * len + l;
            let max = (0..classes).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..classes).map(|c| (x[at(c)] - max).exp()).sum();
            let log_z = max + sum.ln();
            for c in 0..classes {
                probs[at(c)] = (x[at(c)] - log_z).exp();
            }
            total += log_z - x[at(labels[b * len + l])];
        }
    }
    Ok((Tensor::scalar(total / (batch * len) as f64), probs))
}

fn weight_groups(v: &Tensor, g: &Tensor) -> Result<usize> {
    let groups = g.numel();
    let ok = if v.rank() == 1 {
        groups == 1
    } else {
        groups == v.shape()[0]
    };
    if !ok || g.rank() != 1 {
        return Err(Error::dim(
            "weight_norm_apply",
            format!("magnitude {:?} does not match direction {:?}", g.shape(), v.shape()),
        ));
    }
    Ok(groups)
}

fn weight_norm(v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let groups = weight_groups(v, g)?;
    let per = v.numel() / groups;
    let mut out = v.data().to_vec();
    for (i, row) in out.chunks_mut(per).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = g.data()[i] / n;
        row.iter_mut().for_each(|x| *x *= s);
    }
    Tensor::new(v.shape().to_vec(), out)
}

fn weight_norm_vjp(v: &Tensor, g: &Tensor, cot: &Tensor) -> Result<(Tensor, Tensor)> {
    let groups = weight_groups(v, g)?;
    let per = v.numel() / groups;
    let mut dv = vec![0.0; v.numel()];
    let mut dg = vec![0.0; groups];
    for i in 0..groups {
        let vi = &v.data()[i * per..(i + 1) * per];
        let gi = &cot.data()[i * per..(i + 1) * per];
        let n = vi.iter().map(|x| x * x).sum::<f64>().sqrt();
        let proj: f64 = vi.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>() / n;
        dg[i] = proj;
        let s = g.data()[i] / n;
        for j in 0..per {
            dv[i * per + j] = s * (gi[j] - proj * vi[j] / n);
        }
    }
    Ok((Tensor::new(v.shape().to_vec(), dv)?, Tensor::from_vec(dg)))
}

/// Forward layer norm; also returns normalized activations and inverse std per row.
fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = *x.shape().last().expect("tensor rank >= 1");
    if gamma.numel() != d || beta.numel() != d || gamma.rank() != 1 || beta.rank() != 1 {
        return Err(Error::dim(
            "layer_norm",
            format!("gain/shift must have {d} entries, got {:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / d);
    for (r, row) in x.data().chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std))
}

fn layer_norm_vjp(x: &Tensor, gamma: &Tensor, cot: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let d = *x.shape().last().expect("tensor rank >= 1");
    let beta = Tensor::zeros(&[d]);
    let (_, xhat, inv_std) = layer_norm(x, gamma, &beta)?;
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (r, is) in inv_std.iter().enumerate() {
        let g = &cot.data()[r * d..(r + 1) * d];
        let h = &xhat[r * d..(r + 1) * d];
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
            let dh = g[j] * gamma.data()[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            let dh = g[j] * gamma.data()[j];
            dx[r * d + j] = is * (dh - mean_dh - h[j] * mean_dh_h);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let out = Kernel::Relu.forward(&[&Tensor::from_vec(vec![-1.0, 2.0])]).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let y = Kernel::Relu.forward(&[&x]).unwrap();
        let g = Kernel::Relu
            .vjp(&[&x], &y, &Tensor::from_vec(vec![1.0, 1.0]), &[true])
            .unwrap();
        assert_eq!(g[0].as_ref().unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 1, 1], &[1.0]);
        let b = Tensor::from_vec(vec![0.0]);
        let y = Kernel::Conv1d.forward(&[&x, &w, &b]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_zero_padding_preserves_length() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 1, 3], &[1.0, 1.0, 1.0]);
        let b = Tensor::from_vec(vec![0.5]);
        let y = Kernel::Conv1d.forward(&[&x, &w, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3]);
        assert_eq!(y.data(), &[3.5, 6.5, 5.5]);
    }

    #[test]
    fn conv1d_rejects_mismatched_channels() {
        let x = t(&[1, 2, 3], &[0.0; 6]);
        let w = t(&[1, 1, 3], &[0.0; 3]);
        let b = Tensor::from_vec(vec![0.0]);
        let err = Kernel::Conv1d.forward(&[&x, &w, &b]).unwrap_err();
        assert!(matches!(err, Error::Dimension { kernel: "conv1d", .. }));
    }

    #[test]
    fn weight_norm_scales_to_magnitude() {
        let v = Tensor::from_vec(vec![3.0, 4.0]);
        let g = Tensor::from_vec(vec![10.0]);
        let w = Kernel::WeightNormApply.forward(&[&v, &g]).unwrap();
        assert!((w.data()[0] - 6.0).abs() < 1e-12);
        assert!((w.data()[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let err = Kernel::MatMul.forward(&[&a, &a]).unwrap_err();
        assert!(matches!(err, Error::Dimension { kernel: "matmul", .. }));
    }

    #[test]
    fn non_finite_output_names_kernel() {
        let a = Tensor::from_vec(vec![0.0, 0.0]);
        let err = Kernel::CosineSimilarity.forward(&[&a, &a]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { kernel: "cosine_similarity" }));
        let big = Tensor::from_vec(vec![f64::MAX, f64::MAX]);
        let err = Kernel::Add.forward(&[&big, &big]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { kernel: "add" }));
    }

    #[test]
    fn softmax_ce_uniform_is_ln2() {
        let logits = Tensor::zeros(&[3, 2, 4]);
        let labels: Arc<[usize]> = vec![0, 1, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0].into();
        let loss = Kernel::SoftmaxCrossEntropy(labels).forward(&[&logits]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bias_add_broadcasts_over_channels() {
        let x = Tensor::zeros(&[2, 2, 2]);
        let b = Tensor::from_vec(vec![1.0, -1.0]);
        let y = Kernel::BiasAdd.forward(&[&x, &b]).unwrap();
        assert_eq!(y.data(), &[1., 1., -1., -1., 1., 1., -1., -1.]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let x = t(&[2, 3], &[1.0, 2.0, 6.0, -1.0, 0.0, 4.0]);
        let y = Kernel::LayerNorm
            .forward(&[&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3])])
            .unwrap();
        for row in y.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
