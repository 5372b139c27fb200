use alloc::vec;
use alloc::vec::Vec;

use super::ops::Op;
use super::Tensor;
use crate::error::{invalid, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis along which a rank-2 softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each row (across columns).
    Row,
    /// Normalize each column (across rows).
    Column,
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Eager reverse-mode tape. Every operation appends one node, so node order
/// is a topological order of the computation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    /// Records a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid("backward requires a scalar loss"));
        }
        let mut acc = GradAcc {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            needs: self.nodes.iter().map(|n| n.needs_grad).collect(),
        };
        if acc.needs[loss.0] {
            acc.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = acc.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                acc.grads[i] = Some(g);
                continue;
            }
            node.op.backprop(&self.nodes, &node.value, &g, &mut acc);
        }
        let grads = self
            .nodes
            .iter()
            .zip(acc.grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (Op::Leaf, None) if node.needs_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

pub(crate) struct GradAcc {
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
}

impl GradAcc {
    /// Gradient buffer for `v`, or `None` when `v` is not differentiated.
    pub(crate) fn slot(&mut self, v: Var, len: usize) -> Option<&mut [f64]> {
        if !self.needs[v.0] {
            return None;
        }
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
