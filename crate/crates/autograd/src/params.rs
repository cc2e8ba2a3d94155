use std::cell::RefCell;
use std::collections::HashMap;

use crate::{Float, Gradients, Tensor, Var};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer and counted as a model parameter.
    Learnable,
    /// State updated outside the optimizer (e.g. running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named, ordered collection of model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replace values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        if other.entries.len() != self.entries.len() {
            return Err(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            ));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// How a forward pass treats the parameters it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Training-mode layers (batch statistics, buffer updates).
    pub train: bool,
    /// Whether learnable parameters become gradient leaves.
    pub track: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { train: true, track: true };
    pub const EVAL: Mode = Mode { train: false, track: false };
    /// Eval-mode layers with gradients on parameters (used for gradient checks).
    pub const EVAL_TRACKED: Mode = Mode { train: false, track: true };
}

/// One forward pass over a [`ParamStore`]: hands out graph leaves for
/// parameters and collects buffer updates to apply afterwards.
pub struct Binding<'a, T: Float> {
    store: &'a ParamStore<T>,
    mode: Mode,
    vars: RefCell<HashMap<ParamId, Var<T>>>,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'a, T: Float> Binding<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            vars: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph node for a parameter; the same node is returned on repeated calls.
    pub fn var(&self, id: ParamId) -> Var<T> {
        if let Some(v) = self.vars.borrow().get(&id) {
            return v.clone();
        }
        let entry = self.store.entry(id);
        let v = if self.mode.track && entry.kind == ParamKind::Learnable {
            Var::leaf(entry.value.clone())
        } else {
            Var::constant(entry.value.clone())
        };
        self.vars.borrow_mut().insert(id, v.clone());
        v
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    pub fn push_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Gradients of the learnable parameters that took part in the graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .vars
            .borrow()
            .iter()
            .filter_map(|(&id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Buffer updates recorded during the pass, in order.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.updates.into_inner()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, v) in updates {
            assert_eq!(self.get(id).shape(), v.shape(), "buffer update shape");
            *self.get_mut(id) = v;
        }
    }
}
