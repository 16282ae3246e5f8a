//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op whose inputs depend on a parameter. Values
//! that never touch a parameter are plain constants and cost nothing on the
//! tape. With recording disabled the graph keeps no state at all, so eval
//! passes free activations as soon as the last [`Var`] referencing them drops.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Arc<Tensor>,
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value: Arc::new(value) });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn get_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; clones the tensor first if a live graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.get(id).shape(), value.shape(), "shape change for {}", self.name(id));
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &*e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.iter().map(|(_, _, t)| Some(Tensor::zeros(t.shape()))).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn slot(&mut self, id: ParamId) -> &mut Option<Tensor> {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        &mut self.grads[id.0]
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients, scale: f32) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                let slot = self.slot(ParamId(i));
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += scale * b;
                        }
                    }
                    None => {
                        let mut t = g.clone();
                        t.scale(scale);
                        *slot = Some(t);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    /// Sum of squared entries over the given parameters.
    pub fn sq_norm<I: IntoIterator<Item = ParamId>>(&self, ids: I) -> f64 {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .flat_map(|t| t.data().iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    /// Drops every entry for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }
}

/// Inputs handed to a backward closure.
pub struct BackCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: &'a [Arc<Tensor>],
    pub out: &'a Tensor,
    pub needs: &'a [bool],
}

pub(crate) type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    inputs: Vec<Arc<Tensor>>,
    out: Arc<Tensor>,
    backward: Option<BackFn>,
    param: Option<ParamId>,
}

/// The differentiation tape. Not `Sync`; one graph per worker.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A graph that records nothing; every op is evaluated eagerly.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input: never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        Var { g: self, id: None, value: Arc::new(t) }
    }

    pub fn constant_arc(&self, t: Arc<Tensor>) -> Var<'_> {
        Var { g: self, id: None, value: t }
    }

    /// A parameter leaf. Gradients flow back to `id` in [`Graph::backward`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let value = store.get_arc(id);
        if !self.record {
            return Var { g: self, id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: vec![],
            inputs: vec![],
            out: Arc::clone(&value),
            backward: None,
            param: Some(id),
        });
        Var { g: self, id: Some(nodes.len() - 1), value }
    }

    /// Record an op. `backward` receives the upstream gradient and returns one
    /// optional gradient per input, shaped like that input.
    pub fn op<'g>(
        &'g self,
        inputs: &[&Var<'g>],
        out: Tensor,
        backward: impl Fn(&BackCtx) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let out = Arc::new(out);
        let tracked = self.record && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Var { g: self, id: None, value: out };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: inputs.iter().map(|v| v.id).collect(),
            inputs: inputs.iter().map(|v| Arc::clone(&v.value)).collect(),
            out: Arc::clone(&out),
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var { g: self, id: Some(nodes.len() - 1), value: out }
    }

    /// Reverse sweep from a scalar `loss`. Consumes the recorded tape.
    pub fn backward(&self, loss: &Var<'_>) -> Gradients {
        assert_eq!(loss.value.numel(), 1, "backward needs a scalar loss");
        let seed = Tensor::full(loss.value.shape(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse sweep with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: &Var<'_>, seed: Tensor) -> Gradients {
        let mut out = Gradients::default();
        let Some(root_id) = root.id else {
            return out;
        };
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root_id + 1);
        grads.resize_with(root_id + 1, || None);
        grads[root_id] = Some(seed);
        for id in (0..=root_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = std::mem::replace(
                &mut nodes[id],
                Node { parents: vec![], inputs: vec![], out: Arc::new(Tensor::scalar(0.0)), backward: None, param: None },
            );
            if let Some(pid) = node.param {
                let slot = out.slot(pid);
                match slot {
                    Some(acc) => acc.add_assign(&grad),
                    None => *slot = Some(grad),
                }
                continue;
            }
            let Some(bw) = node.backward else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let pgrads = bw(&BackCtx { grad: &grad, inputs: &node.inputs, out: &node.out, needs: &needs });
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for ((parent, g), input) in node.parents.iter().zip(pgrads).zip(&node.inputs) {
                if let (Some(p), Some(g)) = (parent, g) {
                    debug_assert_eq!(g.shape(), input.shape(), "gradient shape mismatch");
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        nodes.clear();
        out
    }
}

/// A value in a [`Graph`].
#[derive(Clone)]
pub struct Var<'g> {
    pub(crate) g: &'g Graph,
    pub(crate) id: Option<usize>,
    pub(crate) value: Arc<Tensor>,
}

impl<'g> Var<'g> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    /// True when gradients can flow through this value.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        Var { g: self.g, id: None, value: Arc::clone(&self.value) }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value.shape()).finish()
    }
}
