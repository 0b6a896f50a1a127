//! Named parameter storage shared by the backbone and the fine-tuning modules.

use std::collections::{BTreeSet, HashMap};

use crate::error::{bail, Result};
use crate::tensor::{derive_seed, init_params, InitScheme, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    /// Hierarchical path such as `enc.3.ffn.w1`.
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, name-indexed parameter set. Insertion order is the enumeration
/// order everywhere (binding, checkpoints, optimizer state).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Stable 64-bit FNV-1a hash, used to key per-parameter init streams.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            bail!(Config, "duplicate parameter name '{name}'");
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    /// Inserts a freshly initialized parameter whose stream is keyed by
    /// `(seed, name)`.
    pub fn init(&mut self, name: &str, shape: &[usize], scheme: InitScheme, seed: u64) -> Result<usize> {
        let t = init_params(shape, scheme, derive_seed(seed, name_hash(name)));
        self.insert(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].trainable).collect()
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn set_trainable(&mut self, names: &BTreeSet<String>) {
        for p in &mut self.params {
            p.trainable = names.contains(&p.name);
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Mutable tensors for the given ids, which must be strictly increasing.
    pub fn tensors_mut(&mut self, ids: &[usize]) -> Vec<&mut Tensor> {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let mut wanted = ids.iter().peekable();
        let mut out = Vec::with_capacity(ids.len());
        for (i, p) in self.params.iter_mut().enumerate() {
            if wanted.peek() == Some(&&i) {
                wanted.next();
                out.push(&mut p.tensor);
            }
        }
        out
    }

    /// Overwrites the tensor of an existing parameter, checking its shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let Some(id) = self.id(name) else {
            bail!(Load, "no parameter named '{name}'");
        };
        let p = &mut self.params[id];
        if p.tensor.shape() != tensor.shape() {
            bail!(
                Load,
                "shape mismatch for '{name}': have {:?}, got {:?}",
                p.tensor.shape(),
                tensor.shape()
            );
        }
        p.tensor = tensor;
        Ok(())
    }
}
