use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Grads, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter slot. Aliased names resolve to the same id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// Named trainable tensors. Several names may alias one slot; each slot is
/// updated once per optimizer step no matter how many names point at it.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T> {
    slots: Vec<Slot<T>>,
    names: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.names.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: None,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers `name` as another handle on the slot behind `target`.
    pub fn alias(&mut self, name: &str, target: &str) -> Result<ParamId> {
        let id = self
            .id(target)
            .ok_or_else(|| Error::contract(format!("alias target {target:?} not found")))?;
        if self.names.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    /// Number of distinct slots.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// All registered names (aliases included), sorted.
    pub fn names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.names.iter().map(|(n, &id)| (n.as_str(), id))
    }

    /// Distinct slots ordered by canonical name.
    pub fn slots(&self) -> Vec<(ParamId, &str)> {
        let mut v: Vec<_> = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| (ParamId(i), s.name.as_str()))
            .collect();
        v.sort_by(|a, b| a.1.cmp(b.1));
        v
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient for {}: expected {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                grad.shape()
            )));
        }
        slot.grad = Some(grad);
        Ok(())
    }

    /// Installs one gradient per slot, indexed by slot id; `None` becomes zeros.
    pub fn set_grads(&mut self, grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::contract("gradient count does not match slot count"));
        }
        for (i, g) in grads.into_iter().enumerate() {
            let g = g.unwrap_or_else(|| Tensor::zeros(self.slots[i].value.shape()));
            self.set_grad(ParamId(i), g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for s in &mut self.slots {
            s.grad = None;
        }
    }

    /// Every slot value as a flat vector, in slot-id order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.slots.iter().map(|s| &s.value)
    }
}

/// Lazily materializes parameters as leaves of one graph.
pub struct Bound<'g, T> {
    graph: &'g Graph<T>,
    params: &'g ParameterSet<T>,
    leaves: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn new(graph: &'g Graph<T>, params: &'g ParameterSet<T>) -> Self {
        Self {
            graph,
            params,
            leaves: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn params(&self) -> &'g ParameterSet<T> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut leaves = self.leaves.borrow_mut();
        *leaves[id.0].get_or_insert_with(|| self.graph.leaf(self.params.get(id).clone()))
    }

    /// Per-slot gradients from `grads`; slots never used by the graph get `None`.
    pub fn slot_grads(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.leaves
            .borrow()
            .iter()
            .map(|leaf| leaf.and_then(|v| grads.take(v.id)))
            .collect()
    }
}
