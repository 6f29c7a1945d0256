//! Tape of executed operations and the reverse pass over it.
//!
//! Every operation appends one node holding its output value and, when any
//! input needs a gradient, whatever it saved for the backward rule. The
//! reverse pass walks the tape from the last node to the first, so the
//! execution order is the topological order.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Debug)]
pub(crate) enum BMap {
    Same,
    /// `b` repeats every `len` elements of `a` (trailing-dims broadcast).
    Cyclic(usize),
    Gather(Vec<usize>),
}

impl BMap {
    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            BMap::Same => i,
            BMap::Cyclic(len) => i % len,
            BMap::Gather(map) => map[i],
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, shared_b: bool },
    Add { a: Var, b: Var, map: BMap },
    Sub { a: Var, b: Var, map: BMap },
    Mul { a: Var, b: Var, map: BMap },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Exp { a: Var },
    Gelu { a: Var },
    SumAll { a: Var },
    SumLast { a: Var },
    MeanLeading { a: Var },
    Softmax { a: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var> },
    Narrow { a: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, keep: Vec<T> },
    Rope { a: Var, cos: Vec<T>, sin: Vec<T> },
    IndexRows { a: Var, idx: Vec<usize> },
    GatherEntries { a: Var, idx: Vec<usize> },
    CombineRows { parts: Vec<(Var, Vec<usize>)> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
    /// Created by [`Graph::leaf`] and friends rather than by an op.
    pub(crate) input: bool,
}

/// Ordered record of differentiable operations.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    recording: bool,
    backward_done: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for a later [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            backward_done: false,
            check_finite: false,
        }
    }

    /// A graph that only evaluates; nothing is saved for a reverse pass.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Verify every op output is finite, failing with the op name otherwise.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Adds a leaf that shares storage with the caller, e.g. model weights.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            input: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Number of nodes so far, for use as a [`Graph::release_since`] mark.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Frees the values of op outputs created at or after `mark`, except
    /// those in `keep`, so long forward passes reuse memory. Leaves are
    /// never freed. Reading a freed node yields an empty tensor.
    ///
    /// Does nothing on a recording graph, whose values the reverse pass needs.
    pub fn release_since(&mut self, mark: usize, keep: &[Var]) {
        if self.recording {
            return;
        }
        let empty = Arc::new(Tensor::zeros(vec![0]));
        for (i, n) in self.nodes.iter_mut().enumerate().skip(mark) {
            if !n.input && !keep.iter().any(|k| k.0 == i) {
                n.value = Arc::clone(&empty);
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears all gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub(crate) fn needs_grad(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = self.needs_grad(inputs);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
            input: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Like [`Graph::accumulate`] but adds `f(i)` into element `i` without
    /// materialising a full-size delta first.
    pub(crate) fn accumulate_with(&mut self, v: Var, f: impl Fn(&mut [T])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); len]);
        f(g);
    }

    /// Reverse pass from a scalar `loss`, seeding d(loss)/d(loss) = 1.
    ///
    /// Running it twice without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.recording {
            return Err(Error::Contract("graph was built without recording".into()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.backprop(id);
        }
        Ok(())
    }
}
