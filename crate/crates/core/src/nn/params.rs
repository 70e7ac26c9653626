use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Named parameters plus a freeze flag per parameter.
///
/// Both maps always carry the same key set. Ordered maps keep iteration (and
/// therefore every reduction over parameters) deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an unfrozen parameter. Re-inserting an existing name is an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` already exists")));
        }
        self.frozen.insert(name.clone(), false);
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.get(name).copied().unwrap_or(false)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        match self.frozen.get_mut(name) {
            Some(flag) => {
                *flag = frozen;
                Ok(())
            }
            None => Err(Error::contract(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn freeze_all(&mut self) {
        self.frozen.values_mut().for_each(|f| *f = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.values_mut().for_each(|f| *f = false);
    }

    /// Replaces the whole mask. `mask` must name exactly the stored parameters.
    pub fn set_freeze_mask(&mut self, mask: &BTreeMap<String, bool>) -> Result<()> {
        if mask.len() != self.params.len() || mask.keys().any(|k| !self.params.contains_key(k)) {
            return Err(Error::contract(
                "freeze mask keys must match parameter names exactly",
            ));
        }
        self.frozen = mask.clone();
        Ok(())
    }

    pub fn freeze_mask(&self) -> &BTreeMap<String, bool> {
        &self.frozen
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.frozen
            .iter()
            .filter(|(_, &f)| !f)
            .map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// True when every parameter matches `other` bit for bit.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .all(|(k, v)| other.params.get(k).is_some_and(|o| v.bit_eq(o)))
    }

    /// Names whose values differ bitwise from `other`.
    pub fn changed_since(&self, other: &ParamStore) -> Vec<String> {
        self.params
            .iter()
            .filter(|(k, v)| other.params.get(*k).map_or(true, |o| !v.bit_eq(o)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values (freeze flags
    /// excluded).
    pub fn content_hash(&self) -> String {
        let mut parts: Vec<Vec<u8>> = Vec::with_capacity(self.params.len() * 3);
        for (name, t) in &self.params {
            parts.push(name.as_bytes().to_vec());
            parts.push(t.shape().iter().flat_map(|d| (*d as u64).to_le_bytes()).collect());
            parts.push(t.data().iter().flat_map(|v| v.to_le_bytes()).collect());
        }
        crate::digest::sha256_parts(parts)
    }
}
