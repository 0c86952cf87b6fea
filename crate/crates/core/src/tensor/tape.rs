use std::cell::{Ref, RefCell};

use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: given the output gradient, the parent values and the
/// output value, return one optional gradient per parent.
pub type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of operations. Node ids increase monotonically, so every
/// operation's inputs precede it and a reverse sweep is a valid
/// topological order.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding `Var`s must not be used after.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(value, true)
    }

    /// Records a leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        value.check_finite("leaf")?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Binds every parameter as a gradient-receiving leaf, in order.
    pub fn bind_params(&self, params: &[Param<T>]) -> Result<Vec<Var<'_, T>>> {
        params.iter().map(|p| self.param(p.value.clone())).collect()
    }

    /// Records the result of an operation. The backward rule is dropped
    /// when no parent requires a gradient.
    pub fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        value.check_finite(op)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar loss. Gradients from fan-out are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].as_ref() else {
                continue;
            };
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward(grad_out, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                if g.shape() != nodes[pid].value.shape() {
                    return Err(Error::Defect(format!(
                        "{} produced gradient {:?} for input {:?}",
                        node.op,
                        g.shape(),
                        nodes[pid].value.shape()
                    )));
                }
                g.check_finite(node.op)?;
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Moves the gradients of `bound` into the matching parameters,
    /// accumulating onto any gradient already present.
    pub fn accumulate_into(&mut self, params: &mut [Param<T>], bound: &[Var<'_, T>]) {
        for (p, v) in params.iter_mut().zip(bound) {
            if let Some(g) = self.take(*v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => p.grad = Some(g),
                }
            }
        }
    }
}
