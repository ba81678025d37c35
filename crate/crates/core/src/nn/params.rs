use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named model state: trainable parameters plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, trainable });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.data().len()).sum()
    }

    /// Iterates `(name, tensor)` in sorted-name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.index.iter().map(|(n, id)| (n.as_str(), &self.entries[id.0].value))
    }

    /// Overwrites every entry from `source`, which must hold exactly the same names and shapes.
    pub fn load_from(&mut self, mut source: BTreeMap<String, Tensor>) -> Result<()> {
        for entry in &mut self.entries {
            let t = source
                .remove(&entry.name)
                .ok_or_else(|| Error::State(format!("checkpoint is missing `{}`", entry.name)))?;
            if t.shape() != entry.value.shape() {
                return Err(Error::State(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    entry.name,
                    t.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = t;
        }
        if let Some(extra) = source.keys().next() {
            return Err(Error::State(format!("checkpoint has unexpected entry `{extra}`")));
        }
        Ok(())
    }
}

/// Deterministic initializers driven by a seeded ChaCha stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform `rows×cols` matrix.
    pub fn glorot(&mut self, rows: usize, cols: usize) -> Tensor {
        let a = (6.0 / (rows + cols) as f32).sqrt();
        self.uniform(rows, cols, a)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, a: f32) -> Tensor {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..=a)).collect();
        Tensor::new(rows, cols, data)
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f32) -> Tensor {
        let dist = rand_distr::Normal::new(0.0f32, std).expect("finite std");
        let data = (0..rows * cols).map(|_| self.rng.sample(dist)).collect();
        Tensor::new(rows, cols, data)
    }
}
