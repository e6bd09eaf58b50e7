//! Named parameter collections.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Layer path → weight array. Names are unique; iteration is in name order.
///
/// Each instance carries a process-unique id that a [`crate::autodiff::Tape`]
/// uses to decide which sets receive gradients. Clones get a fresh id.
#[derive(Debug)]
pub struct ParameterSet {
    id: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParameterSet {
    fn clone(&self) -> Self {
        ParameterSet {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            tensors: self.tensors.clone(),
        }
    }
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParameterSet {
            tensors,
            ..Self::new()
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Fails on the first parameter holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }

    /// Checks that names and shapes match `expected` exactly.
    pub fn check_shapes(&self, expected: &BTreeMap<String, Vec<usize>>) -> Result<()> {
        for (name, shape) in expected {
            match self.tensors.get(name) {
                None => return Err(Error::config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}
