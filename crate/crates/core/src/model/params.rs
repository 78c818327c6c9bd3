use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unit a parameter belongs to for freezing, pruning and learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ParamGroup {
    /// Freezable encoder layer; 0 is the patch embedding.
    Layer(usize),
    /// Decoder head by position in the head list.
    Head(usize),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Whether weight decay applies (matrices only).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let decay = value.rank() >= 2;
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Xavier-uniform `[fan_in, fan_out]` matrix.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.gen_range(-a..a))
}

/// Maps parameters into one graph, creating each leaf on first use.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Vec<bool>,
    nodes: Vec<Option<NodeId>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: Vec<bool>) -> Self {
        debug_assert_eq!(trainable.len(), store.len());
        Self {
            store,
            nodes: vec![None; store.len()],
            trainable,
        }
    }

    pub fn param(&mut self, g: &mut Graph, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let n = g.leaf(self.store.get(id).value.clone(), self.trainable[id.0]);
        self.nodes[id.0] = Some(n);
        n
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn node(&self, id: ParamId) -> Option<NodeId> {
        self.nodes[id.0]
    }

    /// Pulls parameter gradients out of `grads`, keyed by parameter. Any
    /// gradient reaching a non-trainable parameter is returned in the
    /// second list so callers can flag it.
    pub fn collect(&self, grads: &mut Gradients) -> (Vec<(ParamId, Tensor)>, Vec<ParamId>) {
        let mut out = Vec::new();
        let mut stray = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(node) = node else { continue };
            if let Some(t) = grads.remove(*node) {
                if self.trainable[i] {
                    out.push((ParamId(i), t));
                } else {
                    stray.push(ParamId(i));
                }
            }
        }
        (out, stray)
    }
}
