//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! replays the record in reverse and sums gradient contributions across
//! fan-out. Parameters live in a [`ParamStore`] and are bound into a graph per
//! forward pass.

mod graph;
mod scalar;
mod tensor;

use std::collections::HashMap;

pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors. Several names may alias one tensor (weight
/// sharing); [`ParamStore::id`] exposes the aliasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a new tensor. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn insert(&mut self, name: &str, t: Tensor<F>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Makes `alias` refer to the tensor behind `target`.
    pub fn alias(&mut self, alias: &str, target: ParamId) {
        assert!(!self.index.contains_key(alias), "duplicate parameter {alias}");
        self.index.insert(alias.to_string(), target);
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Canonical (non-alias) name of a parameter.
    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Canonical parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients collected from a graph after `backward`.
pub fn param_grads<F: Scalar>(
    graph: &Graph<F>,
    grads: &Gradients<F>,
    store: &ParamStore<F>,
) -> Vec<Tensor<F>> {
    let mut out: Vec<Tensor<F>> = store
        .iter()
        .map(|(_, _, t)| Tensor::zeros(t.shape()))
        .collect();
    for (id, v) in graph.bound_params() {
        out[id.0] = grads.get(v);
    }
    out
}
