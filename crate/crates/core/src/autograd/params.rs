use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

/// Named parameter arrays keyed by dotted name, each flagged frozen or
/// trainable. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { value, frozen, grad: None });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
        p.frozen = frozen;
        if frozen {
            p.grad = None;
        }
        Ok(())
    }

    /// Applies `frozen` to every entry whose name satisfies `pred`.
    pub fn set_frozen_where(&mut self, frozen: bool, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            if pred(name) {
                p.frozen = frozen;
                if frozen {
                    p.grad = None;
                }
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_frozen_where(true, |_| true);
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, p)| !p.frozen).map(|(k, _)| k.clone()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grad` into the accumulated gradient of `name`. Frozen entries
    /// never accumulate.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
        if p.frozen {
            return Ok(());
        }
        if grad.len() != p.value.numel() {
            return Err(Error::shape(format!("gradient for `{name}` has wrong length")));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec())?),
        }
        Ok(())
    }

    /// Copies every entry whose name starts with `prefix` into a new store.
    pub fn slice_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), Param { grad: None, ..v.clone() }))
                .collect(),
        }
    }

    /// Moves all entries of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(Error::contract(format!("duplicate parameter name `{k}`")));
            }
            self.entries.insert(k, v);
        }
        Ok(())
    }

    /// Names of entries whose values differ bitwise between the two stores.
    /// Entries present in only one store are reported as changed.
    pub fn changed_names(&self, other: &ParamStore) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &self.entries {
            match other.entries.get(k) {
                Some(o) if o.value.bitwise_eq(&v.value) => {}
                _ => out.push(k.clone()),
            }
        }
        for k in other.entries.keys() {
            if !self.entries.contains_key(k) {
                out.push(k.clone());
            }
        }
        out
    }
}
