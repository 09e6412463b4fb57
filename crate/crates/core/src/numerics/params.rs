use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named tensors in canonical (sorted) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Per-tensor checksums, for freeze-isolation checks.
    pub fn checksums(&self) -> BTreeMap<String, u64> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.checksum()))
            .collect()
    }
}

/// Anything that can hand out parameters by qualified name for an
/// optimizer update.
pub trait ParamHost<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;
    fn has_param(&self, name: &str) -> bool;
}

impl<T: Real> ParamHost<T> for ParamStore<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
    fn has_param(&self, name: &str) -> bool {
        self.contains(name)
    }
}
