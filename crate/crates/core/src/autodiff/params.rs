use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S: Real> {
    pub name: String,
    pub value: Tensor<S>,
    pub frozen: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<S: Real = f32> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: stored shape {:?}, new shape {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    /// FNV-1a over names, shapes and raw bits of every parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            feed(e.name.as_bytes());
            for &d in e.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                feed(&v.f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Seeded initializer that registers parameters under a name prefix.
pub struct Init<'a, S: Real, R: Rng> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, S: Real, R: Rng> Init<'a, S, R> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut R, prefix: &str) -> Self {
        Init {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, S, R> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{name}.", self.prefix),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| S::c(dist.sample(self.rng))).collect();
        let t = Tensor::new(shape, data).expect("shape/data agree");
        self.store.add(format!("{}{name}", self.prefix), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store
            .add(format!("{}{name}", self.prefix), Tensor::full(shape, S::c(value)))
    }
}

/// A tape bound to a parameter store: parameters are recorded lazily, once each.
pub struct Session<'a, S: Real = f32> {
    pub tape: Tape<S>,
    store: &'a ParamStore<S>,
    bound: Vec<Option<Var>>,
}

impl<'a, S: Real> Session<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let v = self.tape.leaf(entry.value.clone(), !entry.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters touched by the forward pass so far.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    /// Gradients for every trainable parameter the loss was computed from.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<S>)>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound_params()
            .into_iter()
            .filter(|(id, _)| !self.store.is_frozen(*id))
            .map(|(id, v)| (id, grads.get_or_zeros(v)))
            .collect())
    }
}

impl<S: Real> Deref for Session<'_, S> {
    type Target = Tape<S>;
    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}

impl<S: Real> DerefMut for Session<'_, S> {
    fn deref_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }
}
