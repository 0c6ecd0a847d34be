use std::sync::Arc;

use crate::autodiff::kernels::Kernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    kind: NodeKind,
    requires_grad: bool,
}

#[derive(Debug)]
enum NodeKind {
    Leaf { param: bool },
    Op { kernel: Kernel, inputs: Vec<Var> },
}

/// Records kernel applications in topological order.
///
/// Nodes are appended only after all of their inputs exist, so the node
/// index order is already a valid topological order and backward is a
/// single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves that requested them.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, NodeKind::Leaf { param: false }, false)
    }

    /// A trainable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, NodeKind::Leaf { param: true }, true)
    }

    /// A non-parameter leaf whose gradient is still wanted (e.g. a hidden state).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, NodeKind::Leaf { param: false }, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].kind, NodeKind::Leaf { param: true })
    }

    fn push(&mut self, value: Tensor, kind: NodeKind, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn apply(&mut self, kernel: Kernel, inputs: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            kernel.forward(&vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            out,
            NodeKind::Op {
                kernel,
                inputs: inputs.to_vec(),
            },
            requires_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::MatMul, &[a, b])
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Conv1d, &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Relu, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Add, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Kernel::Scale(c), &[x])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::BiasAdd, &[x, b])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::ReduceMean, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        self.apply(Kernel::SoftmaxCrossEntropy(labels), &[logits])
    }

    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        self.apply(Kernel::WeightNormApply, &[v, g])
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::L2Norm, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Dot, &[a, b])
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::CosineSimilarity, &[a, b])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Kernel::LayerNorm, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Kernel::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Transpose, &[x])
    }

    /// Reverse sweep from a scalar loss seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node has shape {:?}",
                value.shape()
            )));
        }
        self.vjp(loss, &Tensor::full(value.shape(), 1.0))
    }

    /// Pulls an arbitrary cotangent on `output` back to every leaf that
    /// requires a gradient.
    pub fn vjp(&self, output: Var, cotangent: &Tensor) -> Result<Grads> {
        self.pull_back(output, cotangent, None)
    }

    /// Like [`Tape::vjp`] but only propagates along paths that reach
    /// `targets`; other leaves get no adjoint.
    pub fn vjp_wrt(&self, output: Var, cotangent: &Tensor, targets: &[Var]) -> Result<Grads> {
        let mut reach = vec![false; output.0 + 1];
        for (idx, node) in self.nodes[..=output.0].iter().enumerate() {
            reach[idx] = match &node.kind {
                NodeKind::Leaf { .. } => targets.iter().any(|t| t.0 == idx),
                NodeKind::Op { inputs, .. } => inputs.iter().any(|v| reach[v.0]),
            };
        }
        self.pull_back(output, cotangent, Some(&reach))
    }

    fn pull_back(&self, output: Var, cotangent: &Tensor, reach: Option<&[bool]>) -> Result<Grads> {
        let out_shape = self.value(output).shape();
        if out_shape != cotangent.shape() {
            return Err(Error::dim(
                "vjp",
                format!("cotangent {:?} for output {:?}", cotangent.shape(), out_shape),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(cotangent.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let NodeKind::Op { kernel, inputs } = &node.kind else {
                continue;
            };
            let Some(cot) = adj[idx].take() else {
                continue;
            };
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad && reach.is_none_or(|r| r[v.0]))
                .collect();
            if !needs.iter().any(|n| *n) {
                continue;
            }
            let pulled = kernel.vjp(&vals, &node.value, &cot, &needs)?;
            for ((input, g), need) in inputs.iter().zip(pulled).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                match &mut adj[input.0] {
                    Some(acc) => acc.accumulate(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Keep only leaf adjoints; intermediate slots were consumed above.
        for (idx, slot) in adj.iter_mut().enumerate() {
            if matches!(self.nodes[idx].kind, NodeKind::Op { .. }) {
                *slot = None;
            }
        }
        Ok(Grads { slots: adj })
    }

    /// Re-evaluates every recorded op from the stored leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.kind {
                NodeKind::Leaf { .. } => node.value.clone(),
                NodeKind::Op { kernel, inputs } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| &values[v.0]).collect();
                    kernel.forward(&vals)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0, 4.0]));
        let m = tape.reduce_mean(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_ce_gradient_at_symmetric_logits() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, vec![0usize].into()).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(logits).unwrap();
        assert!((g.data()[0] + 0.5).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![2.0]));
        let a = tape.scale(w, 3.0).unwrap();
        let b = tape.add(a, w).unwrap();
        let s = tape.reduce_mean(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0]));
        let w = tape.param(Tensor::from_vec(vec![2.0]));
        let d = tape.dot(c, w).unwrap();
        let g = tape.backward(d).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn replay_reproduces_values_and_backward_is_idempotent() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let w = tape.param(Tensor::new(vec![2, 1, 3], vec![0.5, -1.0, 0.25, 0.1, 0.2, 0.3]).unwrap());
        let b = tape.param(Tensor::from_vec(vec![0.01, -0.02]));
        let y = tape.conv1d(x, w, b).unwrap();
        let r = tape.relu(y).unwrap();
        let n = tape.l2_norm(r).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
        let g1 = tape.backward(n).unwrap();
        let g2 = tape.backward(n).unwrap();
        for v in [x, w, b] {
            assert_eq!(g1.get(v), g2.get(v));
        }
    }
}
