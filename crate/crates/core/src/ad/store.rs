use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Which side of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Generative model parameters (θ).
    Generative,
    /// Recognition model parameters (φ).
    Recognition,
}

#[derive(Clone, Debug)]
pub(crate) struct Slot {
    pub(crate) name: String,
    pub(crate) role: Role,
    pub(crate) value: Arc<Tensor>,
}

/// Named parameter tensors. Slot order is insertion order and is what
/// checkpoints serialize.
///
/// Every mutation bumps a version counter so tapes recorded against an older
/// set of values can be detected.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateSlot(name));
        }
        let id = self.slots.len();
        self.index.insert(name.clone(), id);
        self.slots.push(Slot {
            name,
            role,
            value: Arc::new(value),
        });
        self.version += 1;
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slots[self.id(name)?].value)
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.slots[id].value
    }

    pub(crate) fn shared(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.slots[id].value)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.slots[id].name
    }

    pub fn role(&self, id: usize) -> Role {
        self.slots[id].role
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Replaces a slot's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        self.set_by_id(id, value)
    }

    pub fn set_by_id(&mut self, id: usize, value: Tensor) -> Result<()> {
        let slot = &mut self.slots[id];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set",
                left: slot.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        slot.value = Arc::new(value);
        self.version += 1;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: usize) -> &mut Tensor {
        self.version += 1;
        Arc::make_mut(&mut self.slots[id].value)
    }

    pub(crate) fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Total number of scalar parameters with the given role.
    pub fn count(&self, role: Role) -> usize {
        self.slots
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.value.len())
            .sum()
    }
}

/// Per-slot gradients aligned with a [`ParamStore`]. Missing entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn slot(&self, id: usize) -> Option<&Tensor> {
        self.slots.get(id).and_then(Option::as_ref)
    }

    /// Gradient for a named slot, zero-filled when the slot was not reached.
    pub fn get(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        let id = store.id(name)?;
        Ok(self
            .slot(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
    }

    pub(crate) fn accumulate(&mut self, id: usize, alpha: f64, g: &Tensor) {
        match &mut self.slots[id] {
            Some(t) => t.axpy(alpha, g),
            slot @ None => {
                let mut t = g.clone();
                if alpha != 1.0 {
                    t.scale(alpha);
                }
                *slot = Some(t);
            }
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (id, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, alpha, g);
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.scale(alpha);
        }
    }

    /// Keeps only the slots with the given role.
    pub fn restrict(mut self, store: &ParamStore, role: Role) -> Self {
        for (id, g) in self.slots.iter_mut().enumerate() {
            if store.role(id) != role {
                *g = None;
            }
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|t| t.dot(t))
            .sum::<f64>()
            .sqrt()
    }

    /// Flattens into one vector in slot order, zero-filling unreached slots.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::new();
        for id in 0..store.len() {
            match self.slot(id) {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, store.value(id).len())),
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Role::Generative, Tensor::vector(vec![1.0, 2.0]))
            .unwrap();
        s.insert("b", Role::Recognition, Tensor::scalar(3.0))
            .unwrap();
        s
    }

    #[test]
    fn names_are_unique() {
        let mut s = store();
        assert!(matches!(
            s.insert("a", Role::Generative, Tensor::scalar(0.0)),
            Err(Error::DuplicateSlot(_))
        ));
    }

    #[test]
    fn set_keeps_shape_and_bumps_version() {
        let mut s = store();
        let v = s.version();
        assert!(s.set("a", Tensor::scalar(1.0)).is_err());
        s.set("a", Tensor::vector(vec![5.0, 6.0])).unwrap();
        assert!(s.version() > v);
        assert_eq!(s.get("a").unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn restrict_filters_roles() {
        let s = store();
        let mut g = Gradients::zeros(&s);
        g.accumulate(0, 1.0, &Tensor::vector(vec![1.0, 1.0]));
        g.accumulate(1, 2.0, &Tensor::scalar(1.0));
        let theta = g.clone().restrict(&s, Role::Generative);
        assert!(theta.slot(1).is_none());
        assert_eq!(theta.flatten(&s), vec![1.0, 1.0, 0.0]);
        assert_eq!(g.flatten(&s), vec![1.0, 1.0, 2.0]);
    }
}
