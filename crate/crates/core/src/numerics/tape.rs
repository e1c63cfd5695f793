//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every op appends a node holding its output value, the ids of its inputs and
//! (when any input needs a gradient) a vector-Jacobian closure. Nodes are only
//! ever appended, so insertion order is a topological order and `backward`
//! walks it once in reverse.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient of a node to gradients of each of its inputs
/// (same order as the inputs; `None` means "no contribution").
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    backward_done: Cell<bool>,
    flops: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            backward_done: Cell::new(false),
            flops: Cell::new(0),
        }
    }

    /// A tape that never records backward rules (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node. Parameters pass `requires_grad = true`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Owned copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        (*self.value(v)).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    /// Append an op. The backward closure is only built (and kept) when some
    /// input participates in differentiation.
    pub(crate) fn push<F>(&self, op: &'static str, value: Tensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|&v| self.nodes.borrow()[v.0].requires_grad);
        let backward = requires_grad.then(backward);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.0).collect(),
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Record a user-defined op with an explicit vector-Jacobian rule.
    pub fn custom(&self, op: &'static str, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(op, value, inputs, || backward)
    }

    pub(crate) fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    /// Floating-point operations counted by the ops recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Accumulate gradients of scalar `loss` w.r.t. every node that requires one.
    ///
    /// May be called once per tape; call [`Tape::reset_backward`] to run again.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done.get() {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff(
                "loss is detached: nothing upstream requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Leaves have no backward rule, so their accumulated gradients stay in place.
        self.backward_done.set(true);
        Ok(Gradients { grads })
    }

    pub fn reset_backward(&self) {
        self.backward_done.set(false);
    }
}

/// Gradients produced by [`Tape::backward`], keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
