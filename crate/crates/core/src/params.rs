use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Named parameter collection. Insertion order is stable, which keeps
/// optimizer state, EMA updates, and checkpoints aligned by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("ParamStore::get", format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid("ParamStore::get", format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn shapes_match(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .all(|(k, v)| other.tensors.get(k).map(|o| o.shape() == v.shape()).unwrap_or(false))
    }

    /// Subset of parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    pub fn merged_with(mut self, other: &ParamStore) -> ParamStore {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
        self
    }
}

/// Parameters bound as graph leaves for one forward/backward pass.
pub struct BoundParams<'a> {
    graph: &'a Graph,
    vars: IndexMap<String, Var>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(graph: &'a Graph, store: &ParamStore, requires_grad: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| (k.to_string(), graph.leaf(v.clone(), requires_grad)))
            .collect();
        BoundParams { graph, vars }
    }

    /// Bind a store but route one named parameter to an existing graph
    /// var (used by gradient checks that perturb a single tensor).
    pub fn bind_with_override(
        graph: &'a Graph,
        store: &ParamStore,
        requires_grad: bool,
        name: &str,
        var: Var,
    ) -> Self {
        let mut bound = Self::bind(graph, store, requires_grad);
        bound.vars.insert(name.to_string(), var);
        bound
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("BoundParams::var", format!("unknown parameter {name}")))
    }

    /// Gradients accumulated on the bound leaves after backward, keyed by
    /// parameter name. Parameters that received no gradient are zero.
    pub fn grads(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &var) in &self.vars {
            let g = self
                .graph
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(self.graph.value(var).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
