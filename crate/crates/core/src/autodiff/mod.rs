//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: every op appends one node holding its
//! forward value together with whatever the backward pass needs. Nodes are
//! only ever appended, so the list is topologically ordered by construction
//! and [`Graph::backward`] is a single reverse sweep. `backward` consumes
//! the graph, so saved activations live for exactly one backward pass.

mod kernels;
mod ops;
pub mod gradcheck;

pub use ops::{Padding, PoolMode};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F> {
    pub value: Tensor<F>,
    pub op: ops::Op<F>,
    /// True when this node is, or depends on, a leaf that requires grad.
    pub needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
    /// Running hash over every branch decision taken by piecewise ops
    /// (ReLU signs, pooling argmaxes, log clamps).
    kinks: u64,
    backward_fault: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kinks: 0xcbf2_9ce4_8422_2325,
            backward_fault: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, ops::Op::Leaf, true)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, ops::Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Fingerprint of all branch decisions recorded so far. Two forward
    /// passes with equal fingerprints evaluated the same smooth piece of
    /// every piecewise op.
    pub fn kink_fingerprint(&self) -> u64 {
        self.kinks
    }

    /// Test hook: makes the leaky-ReLU backward use the wrong slope on the
    /// negative side, so gradient checks have a negative control.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.backward_fault = true;
    }

    pub(crate) fn note_kink(&mut self, bits: u64) {
        self.kinks = (self.kinks ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: ops::Op<F>, leaf_grad: bool) -> Var {
        let needs_grad = leaf_grad || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// grad-requiring leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut leaves: Vec<Option<Tensor<F>>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let ops::Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_vec(node.value.shape(), g)?);
                continue;
            }
            ops::backprop(&self.nodes, i, &g, &mut grads, self.backward_fault);
        }
        // Grad-requiring leaves that the loss does not reach get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, ops::Op::Leaf) && node.needs_grad && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a grad-requiring leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests;
