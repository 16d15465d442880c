//! Central registry of trainable parameters.
//!
//! Models hold [`ParamId`]s into a [`ParamStore`]; each training step binds
//! the current values onto a fresh tape, and the optimizer writes updates
//! back through the store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total trainable scalars, optionally restricted to a name prefix.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// He-style fan-in initialization for conv weights [Co,Ci,k,k].
pub fn init_conv(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let scale = (2.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Small uniform initialization for output heads that should start near zero.
pub fn init_small(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn prefix_counting() {
        let mut store = ParamStore::new();
        store.register("net.a.w", Tensor::zeros(&[2, 3]));
        store.register("net.b.w", Tensor::zeros(&[4]));
        store.register("other.w", Tensor::zeros(&[5]));
        assert_eq!(store.count_scalars("net."), 10);
        assert_eq!(store.count_scalars(""), 15);
        assert_eq!(store.ids_with_prefix("net.").len(), 2);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_conv(&mut ChaCha8Rng::seed_from_u64(7), &[2, 2, 3, 3]);
        let b = init_conv(&mut ChaCha8Rng::seed_from_u64(7), &[2, 2, 3, 3]);
        assert_eq!(a, b);
    }
}
