//! Named parameter storage, decoupled from any one computation graph.
//!
//! Graphs are rebuilt per forward pass, so parameters live here as plain
//! arrays and get bound into a graph as leaves each pass via [`Binder`].

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::graph::{numel, Graph, GradientMap, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamData {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// canonical order for initialization and checkpointing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ParamData)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>, shape: Vec<usize>) {
        assert_eq!(values.len(), numel(&shape), "param {name}: values/shape mismatch");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), ParamData { values, shape }));
    }

    pub fn get(&self, name: &str) -> Result<&ParamData> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::UnknownParam { name: name.into() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamData> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::UnknownParam { name: name.into() }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamData)> {
        self.entries.iter().map(|(n, d)| (n.as_str(), d))
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, d)| d.values.len()).sum()
    }
}

/// Which parameters a [`Binder`] exposes as trainable leaves.
#[derive(Debug, Clone)]
pub enum FreezePolicy {
    TrainAll,
    FreezeAll,
    /// Freeze everything except names starting with one of these prefixes.
    FreezeExcept(Vec<String>),
}

impl FreezePolicy {
    fn trainable(&self, name: &str) -> bool {
        match self {
            FreezePolicy::TrainAll => true,
            FreezePolicy::FreezeAll => false,
            FreezePolicy::FreezeExcept(prefixes) => {
                prefixes.iter().any(|p| name.starts_with(p.as_str()))
            }
        }
    }
}

/// Binds store parameters into a graph on first use; remembers the bindings
/// so gradients can be mapped back to names after backward.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, (Tensor, bool)>,
    policy: FreezePolicy,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_policy(store, FreezePolicy::TrainAll)
    }

    /// All bindings become non-trainable constants (frozen teacher, inference).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_policy(store, FreezePolicy::FreezeAll)
    }

    pub fn with_policy(store: &'a ParamStore, policy: FreezePolicy) -> Self {
        Binder {
            store,
            bound: BTreeMap::new(),
            policy,
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Tensor> {
        if let Some(&(t, _)) = self.bound.get(name) {
            return Ok(t);
        }
        let data = self.store.get(name)?;
        let trainable = self.policy.trainable(name);
        let t = if trainable {
            g.leaf(data.values.clone(), data.shape.clone())
        } else {
            g.constant(data.values.clone(), data.shape.clone())
        };
        self.bound.insert(name.to_string(), (t, trainable));
        Ok(t)
    }

    pub fn tensor_bindings(&self) -> BTreeMap<String, Tensor> {
        self.bound.iter().map(|(n, &(t, _))| (n.clone(), t)).collect()
    }

    /// Names bound as trainable leaves this pass, in sorted order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.bound
            .iter()
            .filter(|(_, &(_, trainable))| trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Translate a node-keyed gradient map into a name-keyed one.
    pub fn named_grads(&self, grads: &GradientMap) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &(t, trainable)) in &self.bound {
            if !trainable {
                continue;
            }
            if let Some(g) = grads.get(t) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}
