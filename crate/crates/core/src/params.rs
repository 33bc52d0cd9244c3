//! Named parameter storage and seeded initialisation.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser and counted in the parameter total.
    Trainable,
    /// Persistent state such as running statistics; never updated by gradients.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    kind: ParamKind,
}

/// Flat, insertion-ordered map from dotted names to tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name `{name}`");
        let id = self.entries.len();
        self.entries.push(Entry { name: name.to_string(), value, kind });
        self.index.insert(name.to_string(), id);
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.name(id).starts_with(prefix))
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Replaces the value of `id`, checking the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.get(id).shape(),
            value.shape(),
            "shape mismatch when assigning `{}`",
            self.name(id)
        );
        self.entries[id.0].value = value;
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Scoped parameter registration with a seeded generator.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Child scope `prefix.name`.
    pub fn push(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.qualify(name);
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let full = self.qualify(name);
        self.store.add(&full, value, kind)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape), ParamKind::Trainable)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape), ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.tensor(name, value, ParamKind::Buffer)
    }

    /// He-normal weights for a `[cout, cin, k, k]` convolution.
    pub fn conv_weight(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> ParamId {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = cout * cin * k * k;
        let data: Vec<T> = (0..n).map(|_| T::c(normal.sample(self.rng))).collect();
        self.tensor(name, Tensor::from_vec(&[cout, cin, k, k], data), ParamKind::Trainable)
    }

    /// Uniform `(-bound, bound)` values.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::c(self.rng.random_range(-bound..bound))).collect();
        self.tensor(name, Tensor::from_vec(shape, data), ParamKind::Trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_namespaces_and_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut s = b.push("stem");
        let w = s.conv_weight("conv1.weight", 4, 3, 3);
        let mut bn = s.push("bn1");
        bn.buffer("running_mean", Tensor::zeros(&[4]));
        bn.ones("weight", &[4]);
        assert_eq!(store.name(w), "stem.conv1.weight");
        assert!(store.id("stem.bn1.running_mean").is_some());
        assert_eq!(store.num_parameters(), 4 * 3 * 9 + 4);
    }

    #[test]
    fn init_is_seeded() {
        let make = || {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            Builder::new(&mut store, &mut rng).conv_weight("w", 2, 2, 3);
            store
        };
        assert_eq!(make().get(ParamId(0)), make().get(ParamId(0)));
    }
}
