//! Named, ordered parameter storage and seeded initialization.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::graph::{Graph, GraphError, NodeId};
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
}

/// Ordered map of trainable tensors. Iteration order is insertion order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.entries
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }
}

/// The parameters of a `ParamSet` materialized as trainable leaves of one
/// graph. Keeps the name -> node mapping so gradients can be keyed back by
/// name after `backward`.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    nodes: IndexMap<String, NodeId>,
}

impl ParamBinding {
    pub fn bind(graph: &mut Graph, params: &ParamSet) -> Result<Self, GraphError> {
        let mut nodes = IndexMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let id = graph.param(tensor.clone())?;
            nodes.insert(name.clone(), id);
        }
        Ok(ParamBinding { nodes })
    }

    pub fn node(&self, name: &str) -> Result<NodeId, ParamError> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.nodes.iter().map(|(n, &id)| (n, id))
    }

    /// Re-keys node gradients by parameter name, in binding order.
    pub fn grads_by_name(
        &self,
        mut node_grads: HashMap<NodeId, Tensor>,
    ) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::with_capacity(self.nodes.len());
        for (name, &id) in &self.nodes {
            if let Some(g) = node_grads.remove(&id) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Weight matrix `out x fan_in`, uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
pub fn init_linear_weight(rng: &mut ChaCha8Rng, out_dim: usize, fan_in: usize) -> Tensor {
    uniform_fan_in(rng, &[out_dim, fan_in], fan_in)
}

/// Bias column `out x 1`, same fan-in bound as its weight.
pub fn init_linear_bias(rng: &mut ChaCha8Rng, out_dim: usize, fan_in: usize) -> Tensor {
    uniform_fan_in(rng, &[out_dim, 1], fan_in)
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data constructed together")
}
