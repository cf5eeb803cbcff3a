//! Named parameter storage.
//!
//! Parameters live outside any graph in a `ParamSet` and are bound into a
//! fresh graph each batch as named leaves. `BTreeMap` keys give every
//! iteration (binding, updates, serialization, coordinate sampling) a fixed
//! deterministic order.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Insert every parameter into `g` as a named leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.map {
            ids.insert(name.clone(), g.param(name, value.clone()));
        }
        BoundParams { ids }
    }
}

/// Node ids of parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` not bound in graph")))
    }
}
