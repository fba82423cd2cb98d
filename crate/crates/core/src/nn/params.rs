use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// What a parameter is for; decides what gets frozen, saved and zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Backbone weights regenerated from the base seed.
    Base,
    /// Low-rank adapter factors.
    Adapter,
    /// Weights trained in full (projectors, heads, decoders).
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Array2<F>,
    pub role: ParamRole,
    pub trainable: bool,
}

/// Serialized tensor. Values go through `f64`, which is exact for `f32` and `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array<F: Scalar>(value: &Array2<F>) -> Self {
        let (r, c) = value.dim();
        Self { shape: [r, c], data: value.iter().map(|v| v.as_f64()).collect() }
    }

    pub fn to_array<F: Scalar>(&self) -> Option<Array2<F>> {
        let data = self.data.iter().map(|&v| F::of(v)).collect();
        Array2::from_shape_vec((self.shape[0], self.shape[1]), data).ok()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("checkpoint has no tensor named `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    Shape { name: String, expected: [usize; 2], found: [usize; 2] },
    #[error("checkpoint tensor `{0}` is not used by this model")]
    Unknown(String),
}

/// Flat, named parameter storage for one model.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    base_rng: ChaCha8Rng,
    aux_rng: ChaCha8Rng,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        // Base weights draw from their own stream so that adapter and head
        // layout never changes the regenerated backbone.
        Self {
            entries: Vec::new(),
            base_rng: ChaCha8Rng::seed_from_u64(seed),
            aux_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>, role: ParamRole, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, role, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Gaussian-initialized parameter drawn from the store's seeded stream.
    pub fn normal(&mut self, name: impl Into<String>, shape: (usize, usize), std: f64, role: ParamRole, trainable: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = if role == ParamRole::Base { &mut self.base_rng } else { &mut self.aux_rng };
        let value = Array2::from_shape_simple_fn(shape, || F::of(dist.sample(rng)));
        self.add(name, value, role, trainable)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize), role: ParamRole, trainable: bool) -> ParamId {
        self.add(name, Array2::zeros(shape), role, trainable)
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: (usize, usize), value: F, role: ParamRole, trainable: bool) -> ParamId {
        self.add(name, Array2::from_elem(shape, value), role, trainable)
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, role: ParamRole, trainable: bool) {
        for entry in self.entries.iter_mut().filter(|e| e.role == role) {
            entry.trainable = trainable;
        }
    }

    pub fn count(&self, role: ParamRole) -> usize {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.value.len()).sum()
    }

    /// Zeroes every adapter factor, which makes every adapter delta exactly zero.
    pub fn zero_adapters(&mut self) {
        for entry in self.entries.iter_mut().filter(|e| e.role == ParamRole::Adapter) {
            entry.value.fill(F::zero());
        }
    }

    /// SHA-256 over names and values of all parameters with `role`.
    pub fn checksum(&self, role: ParamRole) -> String {
        let mut hasher = Sha256::new();
        for entry in self.entries.iter().filter(|e| e.role == role) {
            hasher.update(entry.name.as_bytes());
            for v in entry.value.iter() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn snapshot(&self, roles: &[ParamRole]) -> BTreeMap<String, TensorData> {
        self.entries
            .iter()
            .filter(|e| roles.contains(&e.role))
            .map(|e| (e.name.clone(), TensorData::from_array(&e.value)))
            .collect()
    }

    /// Loads every tensor of `roles` from `tensors`; all must be present and
    /// no extra tensor may be left over.
    pub fn restore(&mut self, roles: &[ParamRole], tensors: &BTreeMap<String, TensorData>) -> Result<(), LoadError> {
        let mut used = 0;
        for entry in self.entries.iter_mut().filter(|e| roles.contains(&e.role)) {
            let data = tensors.get(&entry.name).ok_or_else(|| LoadError::Missing(entry.name.clone()))?;
            let (r, c) = entry.value.dim();
            if data.shape != [r, c] {
                return Err(LoadError::Shape { name: entry.name.clone(), expected: [r, c], found: data.shape });
            }
            entry.value = data.to_array().expect("shape checked");
            used += 1;
        }
        if used != tensors.len() {
            let unknown = tensors
                .keys()
                .find(|k| !self.entries.iter().any(|e| &e.name == *k && roles.contains(&e.role)))
                .cloned()
                .unwrap_or_default();
            return Err(LoadError::Unknown(unknown));
        }
        Ok(())
    }
}

/// A forward pass bound to a parameter store.
///
/// Parameters become tape leaves on first use. With `track` set, trainable
/// parameters require gradients; otherwise the whole pass is inference-only.
pub struct Graph<'s, F: Scalar> {
    pub tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: HashMap<ParamId, Var>,
    pub adapters: bool,
    track: bool,
}

impl<'s, F: Scalar> Graph<'s, F> {
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new(), adapters: true, track: false }
    }

    pub fn training(store: &'s ParamStore<F>) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new(), adapters: true, track: true }
    }

    pub fn without_adapters(mut self) -> Self {
        self.adapters = false;
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&var) = self.bound.get(&id) {
            return var;
        }
        let entry = self.store.entry(id);
        let var = self.tape.leaf(entry.value.clone(), self.track && entry.trainable);
        self.bound.insert(id, var);
        var
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, var: Var) -> &Array2<F> {
        self.tape.value(var)
    }

    /// Backpropagates from `loss` and returns gradients of trainable parameters.
    pub fn param_grads(&self, loss: Var) -> Vec<(ParamId, Array2<F>)> {
        let mut grads: Gradients<F> = self.tape.backward(loss);
        let mut out: Vec<(ParamId, Array2<F>)> = self
            .bound
            .iter()
            .filter(|(id, _)| self.store.entry(**id).trainable)
            .filter_map(|(&id, &var)| grads.take(var).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
