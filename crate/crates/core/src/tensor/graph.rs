//! Dynamically recorded tape for reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node holding its forward value,
//! the ids of its inputs and a closure mapping the output gradient to input
//! gradients. Node ids are assigned in creation order, so walking the tape
//! backwards from the loss visits every node after all of its consumers.

use std::cell::RefCell;
use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maps `(grad_out, output, inputs)` to one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A single-threaded computation graph. Independent graphs may live on
/// different threads.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push_node(value, parents, backward, requires_grad)
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&vals)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut acc: Vec<Option<Vec<T>>> = Vec::new();
        acc.resize_with(loss.id + 1, || None);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(nodes.len(), || None);
        if nodes[loss.id].requires_grad {
            acc[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = acc[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    leaf_grads[id] = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    });
                }
                Some(bw) => {
                    let inputs: Vec<&Tensor<T>> =
                        node.parents.iter().map(|&p| &nodes[p].value).collect();
                    let parent_grads = bw(&g, &node.value, &inputs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), nodes[p].value.len());
                        match &mut acc[p] {
                            Some(existing) => {
                                for (e, v) in existing.iter_mut().zip(pg) {
                                    *e += v;
                                }
                            }
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Grads { leaf_grads })
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Grads<T> {
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf; zeros when the leaf is not on the loss's graph.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Tensor<T>> {
        self.leaf_grads.get_mut(id).and_then(Option::take)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_value(self.id, |t| t.shape().to_vec())
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> T {
        self.graph.with_value(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}
