//! Flat, ordered storage for every learnable tensor of a model.
//!
//! Model structs refer to parameters through [`ParamId`] handles, so the same
//! store drives the forward pass, the optimizer, the freeze plan, and the
//! checkpoint writer without any of them walking the module tree.

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to. The freeze plan is
/// expressed in terms of groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Patch embedding, CLS token, positional embedding, MLP sublayers,
    /// LN2, final norm and classifier head.
    Backbone,
    /// QKV/output projections and LN1 of a self-attention sublayer.
    Attention,
    /// Everything owned by a BiLSTM substitute block.
    Substitute,
}

#[derive(Debug, Clone)]
struct Entry<F> {
    name: String,
    group: ParamGroup,
    trainable: bool,
    /// Excluded from decoupled weight decay (biases, norms, embeddings).
    no_decay: bool,
    value: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor<F>,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let no_decay = value.rank() == 1
            || name.ends_with(".cls")
            || name.ends_with(".pos")
            || name.contains(".b_");
        self.entries.push(Entry {
            name,
            group,
            trainable: true,
            no_decay,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn decays(&self, id: ParamId) -> bool {
        !self.entries[id.0].no_decay
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total element count over all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn numel_in(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("blocks.0.mlp.fc1.weight", ParamGroup::Backbone, Tensor::zeros(&[4, 2]));
        let b = s.add("blocks.0.mlp.fc1.bias", ParamGroup::Backbone, Tensor::zeros(&[4]));
        assert_eq!(s.find("blocks.0.mlp.fc1.bias"), Some(b));
        assert_eq!(s.numel(), 12);
        assert!(s.decays(a));
        assert!(!s.decays(b));
    }
}
