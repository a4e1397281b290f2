//! Named parameter storage shared by layers, optimizers, and checkpoints.

use std::collections::HashMap;
use std::rc::Rc;

use crate::array::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    value: Rc<Array>,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn value(&self) -> &Array {
        &self.value
    }
}

/// Flat store of all learnable tensors of a model, addressed by [`ParamId`] or by
/// dotted name (`encoder.stage0.conv1.weight`).
///
/// Values are reference counted so a forward graph can borrow them without a copy;
/// updates after the graph is dropped do not reallocate.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {}", name);
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value: Rc::new(value), trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Array> {
        Rc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Array) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "shape change for parameter {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Rc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Sets the trainable flag of every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.trainable = trainable;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> + '_ {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total scalar count over parameters matching `pred`.
    pub fn count_where(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.count_where(|e| e.trainable)
    }

    pub fn num_total(&self) -> usize {
        self.count_where(|_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_resolve_and_counts_follow_flags() {
        let mut s = ParamStore::new();
        let a = s.add("encoder.w", Array::zeros(&[2, 3]));
        let b = s.add("decoder.w", Array::zeros(&[4]));
        assert_eq!(s.id("decoder.w"), Some(b));
        assert_eq!(s.num_total(), 10);
        s.set_trainable_where(|n| n.starts_with("encoder."), false);
        assert!(!s.is_trainable(a));
        assert_eq!(s.num_trainable(), 4);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("x", Array::zeros(&[1]));
        s.add("x", Array::zeros(&[1]));
    }
}
