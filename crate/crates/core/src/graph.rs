//! Reverse-mode automatic differentiation over an append-only node list.
//!
//! Nodes are evaluated eagerly when they are added. Leaf values can later be
//! replaced with [`Graph::set_leaf`]; the next read or backward pass replays
//! only the nodes downstream of the changed leaves. Every node's inputs have
//! smaller ids, so the list is already in topological order.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

pub type NodeId = usize;

/// The differentiable primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Arctan,
    Square,
    Sigmoid,
    Relu,
    Conv1x1,
    Conv3x3Same,
    MaxPool2x2,
    AvgPool2x2,
    ConcatChannels,
    ReduceMean,
    ReduceSum,
    Matmul,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Arctan,
        OpKind::Square,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Conv1x1,
        OpKind::Conv3x3Same,
        OpKind::MaxPool2x2,
        OpKind::AvgPool2x2,
        OpKind::ConcatChannels,
        OpKind::ReduceMean,
        OpKind::ReduceSum,
        OpKind::Matmul,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Arctan => "arctan",
            OpKind::Square => "square",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Conv3x3Same => "conv3x3_same",
            OpKind::MaxPool2x2 => "maxpool2x2",
            OpKind::AvgPool2x2 => "avgpool2x2",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::Matmul => "matmul",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf { trainable: bool },
    Apply(OpKind),
    Scale(f64),
    Matmul { trans_a: bool, trans_b: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Apply(k) => k.name(),
            Op::Scale(_) => "scale",
            Op::Matmul { .. } => "matmul",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    /// Max-pool winner indices.
    argmax: Vec<u32>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only computation graph. Single writer; distinct graphs are independent.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    stale_leaves: Vec<NodeId>,
}

fn evaluate<T: Real>(op: Op, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<u32>)> {
    let unary = |f: fn(T) -> T| inputs[0].map(f);
    let value = match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::Scale(c) => {
            let c = T::of(c);
            inputs[0].map(|v| v * c)
        }
        Op::Matmul { trans_a, trans_b } => ops::matmul(inputs[0], inputs[1], trans_a, trans_b)?,
        Op::Apply(kind) => match kind {
            OpKind::Add => ops::zip("add", inputs[0], inputs[1], |a, b| a + b)?,
            OpKind::Sub => ops::zip("sub", inputs[0], inputs[1], |a, b| a - b)?,
            OpKind::Mul => ops::zip("mul", inputs[0], inputs[1], |a, b| a * b)?,
            OpKind::Arctan => unary(|v| v.atan()),
            OpKind::Square => unary(|v| v * v),
            OpKind::Sigmoid => unary(ops::sigmoid),
            OpKind::Relu => unary(|v| if v > T::zero() { v } else { T::zero() }),
            OpKind::Conv1x1 => ops::conv1x1(inputs[0], inputs[1], inputs[2])?,
            OpKind::Conv3x3Same => ops::conv3x3(inputs[0], inputs[1], inputs[2])?,
            OpKind::MaxPool2x2 => return ops::pool2x2(inputs[0], true),
            OpKind::AvgPool2x2 => ops::pool2x2(inputs[0], false)?.0,
            OpKind::ConcatChannels => ops::concat_last(inputs)?,
            OpKind::ReduceSum => Tensor::scalar(inputs[0].data().iter().copied().sum()),
            OpKind::ReduceMean => {
                let x = inputs[0];
                if x.is_empty() {
                    return Err(shape_err("reduce_mean", "empty input"));
                }
                let sum: T = x.data().iter().copied().sum();
                Tensor::scalar(sum / T::of(x.len() as f64))
            }
            OpKind::Scale | OpKind::Matmul => unreachable!("carry parameters"),
        },
    };
    Ok((value, Vec::new()))
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            stale_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { trainable },
            inputs: Vec::new(),
            value,
            argmax: Vec::new(),
            requires_grad: trainable,
        });
        self.nodes.len() - 1
    }

    pub fn kind(&self, id: NodeId) -> Option<OpKind> {
        match self.nodes.get(id)?.op {
            Op::Leaf { .. } => None,
            Op::Apply(k) => Some(k),
            Op::Scale(_) => Some(OpKind::Scale),
            Op::Matmul { .. } => Some(OpKind::Matmul),
        }
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(
            self.nodes.get(id).map(|n| n.op),
            Some(Op::Leaf { trainable: true })
        )
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.is_trainable(i)).collect()
    }

    /// Cached value of a node. Call [`Graph::forward_eval`] after
    /// [`Graph::set_leaf`] to refresh downstream values.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id))
    }

    /// Returns the node's value, replaying stale nodes first.
    pub fn forward_eval(&mut self, id: NodeId) -> Result<&Tensor<T>> {
        if id >= self.nodes.len() {
            return Err(Error::UnknownNode(id));
        }
        self.recompute()?;
        Ok(&self.nodes[id].value)
    }

    /// Replaces a leaf value. Shape must be unchanged.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = self.nodes.get_mut(id).ok_or(Error::UnknownNode(id))?;
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::InvalidArgument(format!("node {id} is not a leaf")));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err(
                "set_leaf",
                format!("{:?} -> {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        self.stale_leaves.push(id);
        Ok(())
    }

    /// Re-evaluates every node downstream of a leaf changed since the last pass.
    pub fn recompute(&mut self) -> Result<()> {
        if self.stale_leaves.is_empty() {
            return Ok(());
        }
        let first = *self.stale_leaves.iter().min().unwrap();
        let mut stale = vec![false; self.nodes.len()];
        for &leaf in &self.stale_leaves {
            stale[leaf] = true;
        }
        for id in first..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                continue;
            }
            if !self.nodes[id].inputs.iter().any(|&i| stale[i]) {
                continue;
            }
            stale[id] = true;
            let (value, argmax) = {
                let node = &self.nodes[id];
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                evaluate(node.op, &inputs)?
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: self.nodes[id].op.name(),
                });
            }
            self.nodes[id].value = value;
            self.nodes[id].argmax = argmax;
        }
        self.stale_leaves.clear();
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::UnknownNode(bad));
        }
        self.recompute()?;
        let (value, argmax) = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
            evaluate(op, &refs)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            argmax,
            requires_grad,
        });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Add), vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Sub), vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Mul), vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn arctan(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Arctan), vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Square), vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Sigmoid), vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Relu), vec![a])
    }

    /// Per-pixel affine map: `x [H,W,Cin]`, `w [Cin,Cout]`, `b [Cout]`.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Conv1x1), vec![x, w, b])
    }

    /// Zero-padded same-size cross-correlation: `w [3,3,Cin,Cout]`.
    pub fn conv3x3_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::Conv3x3Same), vec![x, w, b])
    }

    pub fn max_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::MaxPool2x2), vec![x])
    }

    pub fn avg_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::AvgPool2x2), vec![x])
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::ConcatChannels), parts.to_vec())
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::ReduceMean), vec![a])
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Apply(OpKind::ReduceSum), vec![a])
    }

    /// `op(a) · op(b)` where rank ≥ 2 inputs are viewed as matrices with all
    /// leading axes flattened into rows; `op` transposes when requested.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        self.push(Op::Matmul { trans_a, trans_b }, vec![a, b])
    }

    /// Gradient of the scalar `loss` with respect to every trainable leaf.
    /// Leaves the loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if loss >= self.nodes.len() {
            return Err(Error::UnknownNode(loss));
        }
        self.recompute()?;
        let leaves = self.trainable_leaves();
        if leaves.is_empty() {
            return Err(Error::NoTrainableLeaf);
        }
        let loss_value = &self.nodes[loss].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor::full(loss_value.shape(), T::one()));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = self.vjp(id, &dy, &need);
            for ((&input, g), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                if let (Some(g), true) = (g, needed) {
                    accumulate(&mut grads[input], g);
                }
            }
        }

        let grads = leaves
            .into_iter()
            .map(|leaf| {
                let g = grads
                    .get_mut(leaf)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[leaf].value.shape()));
                (leaf, g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn vjp(&self, id: NodeId, dy: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let node = &self.nodes[id];
        let x = |k: usize| &self.nodes[node.inputs[k]].value;
        let elementwise = |f: &dyn Fn(T, T) -> T| {
            let d = x(0)
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| f(v, g))
                .collect();
            vec![Some(Tensor::new(dy.shape().to_vec(), d).expect("shape"))]
        };
        match node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::Scale(c) => {
                let c = T::of(c);
                vec![Some(dy.map(|g| g * c))]
            }
            Op::Matmul { trans_a, trans_b } => {
                ops::matmul_backward(x(0), x(1), trans_a, trans_b, dy, [need[0], need[1]]).into()
            }
            Op::Apply(kind) => match kind {
                OpKind::Add => vec![Some(dy.clone()), Some(dy.clone())],
                OpKind::Sub => vec![Some(dy.clone()), Some(dy.map(|g| -g))],
                OpKind::Mul => {
                    let (a, b) = (x(0), x(1));
                    let da = need[0].then(|| ops::zip("mul", dy, b, |g, v| g * v).expect("shape"));
                    let db = need[1].then(|| ops::zip("mul", dy, a, |g, v| g * v).expect("shape"));
                    vec![da, db]
                }
                OpKind::Arctan => elementwise(&|v, g| g / (T::one() + v * v)),
                OpKind::Square => elementwise(&|v, g| g * (v + v)),
                OpKind::Sigmoid => {
                    let y = &node.value;
                    let d = y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect();
                    vec![Some(Tensor::new(dy.shape().to_vec(), d).expect("shape"))]
                }
                OpKind::Relu => elementwise(&|v, g| if v > T::zero() { g } else { T::zero() }),
                OpKind::Conv1x1 => {
                    ops::conv1x1_backward(x(0), x(1), dy, [need[0], need[1], need[2]]).into()
                }
                OpKind::Conv3x3Same => {
                    ops::conv3x3_backward(x(0), x(1), dy, [need[0], need[1], need[2]]).into()
                }
                OpKind::MaxPool2x2 => {
                    vec![Some(ops::pool2x2_backward(x(0), dy, Some(&node.argmax)))]
                }
                OpKind::AvgPool2x2 => vec![Some(ops::pool2x2_backward(x(0), dy, None))],
                OpKind::ConcatChannels => {
                    let parts: Vec<&Tensor<T>> = (0..node.inputs.len()).map(x).collect();
                    ops::concat_last_backward(&parts, dy)
                        .into_iter()
                        .map(Some)
                        .collect()
                }
                OpKind::ReduceSum => {
                    vec![Some(Tensor::full(x(0).shape(), dy.data()[0]))]
                }
                OpKind::ReduceMean => {
                    let n = T::of(x(0).len() as f64);
                    vec![Some(Tensor::full(x(0).shape(), dy.data()[0] / n))]
                }
                OpKind::Scale | OpKind::Matmul => unreachable!("carry parameters"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn add_is_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[1.0, 2.0]));
        let b = g.constant(vec1(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn arctan_of_zero() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[0.0]));
        let c = g.arctan(a).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn phi_first_component_at_one() {
        // (π/4)/0.67
        let expected = 1.172_236_064_772_310_9;
        let mut g = Graph::new();
        let a = g.param(vec1(&[1.0]));
        let t = g.arctan(a).unwrap();
        let phi = g.scale(t, 1.0 / 0.67).unwrap();
        let loss = g.reduce_sum(phi).unwrap();
        assert!((g.value(phi).unwrap().data()[0] - expected).abs() < 1e-12);
        // (1/0.67) · 1/(1+1)
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(a).unwrap().data()[0] - 0.746_268_656_716_417_9).abs() < 1e-12);
    }

    #[test]
    fn reduce_sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, -2.0, 3.0]));
        let loss = g.reduce_sum(x).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_square_gradient() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[2.0]));
        let sq = g.square(x).unwrap();
        let loss = g.reduce_mean(sq).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let loss = g.reduce_sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_error_paths() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));

        let mut g = Graph::new();
        let c = g.constant(vec1(&[1.0]));
        let loss = g.reduce_sum(c).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::NoTrainableLeaf)));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[1.0, 2.0]));
        let b = g.constant(vec1(&[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[1e300]));
        let b = g.square(a);
        match b {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "square");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn set_leaf_replays_downstream_nodes() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        let c = g.constant(vec1(&[10.0, 10.0]));
        let y = g.mul(x, c).unwrap();
        let loss = g.reduce_sum(y).unwrap();
        g.set_leaf(x, vec1(&[3.0, 4.0])).unwrap();
        assert_eq!(g.forward_eval(loss).unwrap().data(), &[70.0]);
        assert!(g.set_leaf(x, vec1(&[1.0])).is_err());
        assert!(g.set_leaf(y, vec1(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x * x) -> 2x
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.5, -2.0]));
        let y = g.mul(x, x).unwrap();
        let loss = g.reduce_sum(y).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[3.0, -4.0]);
    }
}
