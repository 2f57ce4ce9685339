use super::ops::{self, Op};
use super::{Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<S> {
    pub value: Tensor<S>,
    pub op: Op<S>,
    pub requires_grad: bool,
}

/// Append-only record of one forward computation.
///
/// Nodes are only ever appended and always reference earlier nodes, so the
/// tape is acyclic and its index order is a topological order.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `x` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor<S> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited at most once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            ops::backward(self, idx, &g, &mut grads);
        }
        // Only leaf gradients are kept; intermediates were consumed above.
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves of a tape after [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, x: Var) -> Option<&Tensor<S>> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, x: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(x.0).and_then(|g| g.take())
    }
}

/// Sums `g` into the gradient slot of `target` if that node tracks gradients.
pub(crate) fn accumulate<S: Scalar>(
    tape: &Tape<S>,
    grads: &mut [Option<Tensor<S>>],
    target: Var,
    g: Tensor<S>,
) {
    if !tape.nodes[target.0].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), tape.shape(target), "gradient shape");
    match &mut grads[target.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
