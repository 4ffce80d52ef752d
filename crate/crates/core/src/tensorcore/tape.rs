use std::collections::HashMap;

use crate::error::{Error, Result};

use super::ops::{backward_op, forward_op, BnMode, Op, BN_EPS, L2_EPS};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list of evaluated ops.
///
/// Nodes only ever reference earlier nodes, so insertion order is a
/// topological order and backward is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` and records it.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::contract(format!("unknown node {}", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward_op(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride, pad }, &[x, w, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode) -> Result<NodeId> {
        self.apply(Op::BatchNorm { mode, eps: BN_EPS }, &[x, gamma, beta])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L2Normalize { eps: L2_EPS }, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn sum_last_axis(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::SumLastAxis, &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[x])
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSumExp, &[x])
    }

    pub fn pick_columns(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::PickColumns(idx), &[x])
    }

    /// Row-wise dot product of two equally shaped `[N, D]` nodes.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(format!(
                "row_dot {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        let p = self.mul(a, b)?;
        self.sum_last_axis(p)
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(format!("unknown node {}", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, node {} has dims {:?}",
                loss.0,
                self.nodes[loss.0].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.dims(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.op == Op::Leaf || !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| self.nodes[i.0].requires_grad)
                .collect();
            let input_grads = backward_op(&node.op, &inputs, &node.value, &grad, &needs)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        let mut leaves = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op == Op::Leaf && node.requires_grad {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                leaves.insert(NodeId(idx), g);
            }
        }
        Ok(Gradients { leaves })
    }

    /// Re-evaluates every node from the leaves, substituting `overrides`
    /// for the given leaf values. Returns all node values in tape order.
    pub fn replay(&self, overrides: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = if node.op == Op::Leaf {
                match overrides.get(&NodeId(idx)) {
                    Some(t) if t.dims() == node.value.dims() => t.clone(),
                    Some(t) => {
                        return Err(Error::shape(format!(
                            "override for node {idx} has dims {:?}, expected {:?}",
                            t.dims(),
                            node.value.dims()
                        )))
                    }
                    None => node.value.clone(),
                }
            } else {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
                forward_op(&node.op, &inputs)?
            };
            values.push(v);
        }
        Ok(values)
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.leaves.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relu inputs closer than this to zero reject the sample.
    pub kink_margin: f64,
    /// Coordinates of the leaf to probe; `None` probes all of them.
    pub coords: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            kink_margin: 1e-4,
            coords: None,
        }
    }
}

/// Compares the analytic gradient of `output` with respect to `leaf` against
/// central differences obtained by replaying the tape.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// A relu input within `kink_margin` of zero yields [`Error::KinkProximity`]
/// so the caller can draw another sample.
pub fn grad_check(tape: &Tape, leaf: NodeId, output: NodeId, opts: &GradCheckOptions) -> Result<f64> {
    if tape.op(leaf) != &Op::Leaf || !tape.requires_grad(leaf) {
        return Err(Error::contract("grad_check needs a requires_grad leaf"));
    }
    for node in &tape.nodes {
        if node.op == Op::Relu {
            let x = &tape.nodes[node.inputs[0].0].value;
            if let Some(v) = x.data().iter().find(|v| v.abs() < opts.kink_margin) {
                return Err(Error::KinkProximity(format!("relu input {v:e} near 0")));
            }
        }
    }
    let grads = tape.backward(output)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(tape.value(leaf).dims()));
    let base = tape.value(leaf).clone();
    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..base.numel()).collect(),
    };
    let mut worst: f64 = 0.0;
    let mut overrides = HashMap::new();
    for &c in &coords {
        if c >= base.numel() {
            return Err(Error::contract(format!("coordinate {c} out of range")));
        }
        let mut eval = |delta: f64| -> Result<f64> {
            let mut p = base.clone();
            p.data_mut()[c] += delta;
            overrides.insert(leaf, p);
            let values = tape.replay(&overrides)?;
            values[output.0].item()
        };
        let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
        let a = analytic.data()[c];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[4]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[4]));
    }

    #[test]
    fn constants_get_no_gradient_entry() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(!g.contains(c));
        assert!(g.contains(x));
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![0.3, -1.7, 2.2], vec![0.1, 0.4, -0.9]]).unwrap());
        let w = tape.param(Tensor::from_rows(&[vec![0.5, 1.0], vec![-0.2, 0.3], vec![0.9, -1.1]]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let z = tape.sigmoid(y).unwrap();
        let n = tape.l2_normalize(z).unwrap();
        let _ = tape.sum(n).unwrap();
        let values = tape.replay(&HashMap::new()).unwrap();
        for (i, v) in values.iter().enumerate() {
            assert_eq!(v.data(), tape.nodes[i].value.data());
        }
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.3, -0.2, 0.9]).unwrap());
        let s = tape.scale(x, 2.5).unwrap();
        let out = tape.sum(s).unwrap();
        let err = grad_check(&tape, x, out, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_sigmoid_chain() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.3));
        let a = tape.sigmoid(x).unwrap();
        let b = tape.sigmoid(a).unwrap();
        let out = tape.sum(b).unwrap();
        let err = grad_check(&tape, x, out, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_relu_kinks() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 5e-5]).unwrap());
        let r = tape.relu(x).unwrap();
        let out = tape.sum(r).unwrap();
        assert!(matches!(
            grad_check(&tape, x, out, &GradCheckOptions::default()),
            Err(Error::KinkProximity(_))
        ));
    }
}
