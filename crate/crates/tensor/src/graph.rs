//! Reverse-mode autodiff graph.
//!
//! Every [`Var`] owns its forward value and, when it was produced by a
//! differentiable op, a backward closure plus handles to its parents. Graphs are
//! built eagerly by calling ops and torn down when the last `Var` is dropped.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

pub(crate) struct BackwardArgs<'a> {
    pub out: &'a Tensor,
    pub grad: &'a Tensor,
    pub parents: &'a [Var],
}

struct Node {
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A differentiable handle onto a tensor value.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A leaf whose gradient is accumulated by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Self {
        Self::make(value, Vec::new(), None, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::make(value, Vec::new(), None, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    fn make(
        value: Tensor,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Self {
        Var(Rc::new(Node {
            value,
            grad: RefCell::new(None),
            parents,
            backward,
            requires_grad,
        }))
    }

    /// Records an op result. The backward closure is dropped when no parent needs a gradient.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::make(value, parents, Some(backward), true)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Cuts the graph: same value, no history.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Back-propagates from a one-element output.
    pub fn backward(&self) {
        assert_eq!(
            self.value().numel(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            self.shape()
        );
        self.backward_with(Tensor::ones(self.shape()));
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor) {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Tensor> = HashMap::new();
        pending.insert(Rc::as_ptr(&self.0), seed);
        for var in order.iter().rev() {
            let key = Rc::as_ptr(&var.0);
            let Some(grad) = pending.remove(&key) else {
                continue;
            };
            let node = &var.0;
            match &node.backward {
                None => {
                    let mut slot = node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&grad),
                        None => *slot = Some(grad),
                    }
                }
                Some(backward) => {
                    let grads = backward(&BackwardArgs {
                        out: &node.value,
                        grad: &grad,
                        parents: &node.parents,
                    });
                    assert_eq!(grads.len(), node.parents.len());
                    for (parent, g) in node.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        assert_eq!(g.shape(), parent.shape(), "gradient shape mismatch");
                        let pk = Rc::as_ptr(&parent.0);
                        match pending.get_mut(&pk) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                pending.insert(pk, g);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Nodes reachable from `self` that require gradients, parents before children.
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&var.0);
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in var.0.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
