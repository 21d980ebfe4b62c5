//! Named parameter storage.
//!
//! Every tensor the network owns (trainable weights and batch-norm running
//! statistics) lives in a [`ParamStore`] under a hierarchical dotted name.
//! Checkpoints are snapshots of a store; optimizers walk the trainable
//! subset. Insertion order is deterministic and defines serialization order.

use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{Array1, ArrayD, Ix1};

use crate::elem::Elem;

pub struct ParamEntry<T: Elem> {
    pub value: Arc<ArrayD<T>>,
    pub trainable: bool,
}

pub struct ParamStore<T: Elem> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<T>, trainable: bool) {
        let prev = self
            .entries
            .insert(name.to_string(), ParamEntry { value: Arc::new(value), trainable });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub(crate) fn entry(&self, name: &str) -> &ParamEntry<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> &ArrayD<T> {
        &self.entry(name).value
    }

    /// Clone a 1-axis tensor (batch-norm running statistics).
    pub fn vector(&self, name: &str) -> Array1<T> {
        self.value(name)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: ArrayD<T>) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(entry.value.shape(), value.shape(), "shape change for {name}");
        entry.value = Arc::new(value);
    }

    /// Mutate a tensor in place when uniquely owned (no live tape clones).
    pub fn update<F: FnOnce(&mut ArrayD<T>)>(&mut self, name: &str, f: F) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        f(Arc::make_mut(&mut entry.value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Zero every tensor whose name satisfies the predicate. Test hook for
    /// ablations (zeroed branches, zeroed heads).
    pub fn zero_matching<F: Fn(&str) -> bool>(&mut self, pred: F) -> usize {
        let mut hit = 0;
        for (name, entry) in self.entries.iter_mut() {
            if pred(name) {
                entry.value = Arc::new(ArrayD::zeros(entry.value.raw_dim()));
                hit += 1;
            }
        }
        hit
    }

    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, entry) in self.entries.iter() {
            out.register(name, entry.value.mapv(|v| U::from_f64(v.to_f64())), entry.trainable);
        }
        out
    }
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
