//! Named parameter storage shared by the model, the optimizer, and the
//! checkpoint format. Declaration order is the serialization order.

use std::collections::HashMap;

use crate::graph::{Graph, NodeId};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a learnable tensor under a unique dotted name.
    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor: tensor.with_grad(),
        });
        id
    }

    /// Matrix initialized uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
    pub fn register_matrix(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut StreamRng,
    ) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let t = rng.tensor(&[rows, cols], -bound, bound);
        self.register(name, t)
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn register_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::filled(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total learnable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// L2 norm over all accumulated gradients (absent grads count as zero).
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Maps parameters to graph leaves for one forward pass. Parameters are
/// interned lazily so unused weights never enter the tape.
pub struct Binder {
    bound: Vec<Option<NodeId>>,
}

impl Binder {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            bound: vec![None; store.len()],
        }
    }

    /// Pre-bind every parameter to the given leaves, in store order. Used by
    /// gradient checks that treat all parameters as explicit inputs.
    pub fn from_leaves(ids: &[NodeId]) -> Self {
        Self {
            bound: ids.iter().map(|&id| Some(id)).collect(),
        }
    }

    pub fn node(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let n = g.leaf(store.get(id).clone());
        self.bound[id.0] = Some(n);
        n
    }

    /// Pull gradients for every bound parameter out of the graph and
    /// accumulate them into the store.
    pub fn accumulate_grads(&self, g: &Graph, store: &mut ParamStore) {
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(node) = slot {
                if let Some(grad) = g.grad(*node) {
                    let grad = grad.to_vec();
                    store.get_mut(ParamId(i)).accumulate_grad(&grad);
                }
            }
        }
    }
}
