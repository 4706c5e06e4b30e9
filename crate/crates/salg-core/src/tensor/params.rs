use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SalgError};

use super::Tensor;

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Arc<Vec<f64>>,
    shape: Vec<usize>,
    grad: Vec<f64>,
}

/// Ordered collection of named learnable tensors with accumulating gradients.
///
/// Registration order is the canonical order everywhere (checkpoints,
/// gradient reduction, optimizer updates), which keeps every run
/// bit-reproducible.
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique within one store.
    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(SalgError::Usage(format!("duplicate parameter name: {name}")));
        }
        let id = ParamId(self.entries.len());
        let numel = tensor.numel();
        self.entries.push(Entry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            value: tensor.data_arc(),
            grad: vec![0.0; numel],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalars across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::from_arc(e.shape.clone(), Arc::clone(&e.value))
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Vec<f64>> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Adds `delta` into the accumulated gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = &mut self.entries[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Resets all accumulated gradients to zero.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Multiplies every accumulated gradient by `factor` (batch averaging).
    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Overwrites the value buffer of `id`.
    pub fn set_value(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if data.len() != e.value.len() {
            return Err(SalgError::Usage(format!(
                "set_value: length {} != parameter {} length {}",
                data.len(),
                e.name,
                e.value.len()
            )));
        }
        e.value = Arc::new(data);
        Ok(())
    }

    /// In-place update of one coordinate (used by finite differencing).
    pub fn nudge(&mut self, id: ParamId, coord: usize, delta: f64) {
        let e = &mut self.entries[id.0];
        Arc::make_mut(&mut e.value)[coord] += delta;
    }

    /// Writes one coordinate exactly (bit-exact restore after a nudge).
    pub fn set_coord(&mut self, id: ParamId, coord: usize, v: f64) {
        let e = &mut self.entries[id.0];
        Arc::make_mut(&mut e.value)[coord] = v;
    }

    /// SGD-with-momentum step over every parameter, in registration order.
    /// `velocity` must have one buffer per parameter (same order).
    pub fn sgd_momentum_step(&mut self, velocity: &mut [Vec<f64>], lr: f64, momentum: f64) {
        debug_assert_eq!(velocity.len(), self.entries.len());
        for (e, vel) in self.entries.iter_mut().zip(velocity.iter_mut()) {
            let value = Arc::make_mut(&mut e.value);
            for ((v, g), x) in vel.iter_mut().zip(&e.grad).zip(value.iter_mut()) {
                *v = momentum * *v - lr * g;
                *x += *v;
            }
        }
    }

    /// Zero-initialized velocity buffers matching this store's layout.
    pub fn velocity_like(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| vec![0.0; e.value.len()]).collect()
    }
}

/// Samples a truncated normal value: resample until |x| <= 2*std.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("valid std");
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Deterministic initializer drawing from one seeded stream.
///
/// Weight-like tensors get truncated normal (std 0.02); bias vectors start
/// at zero; layer-norm gains at one.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed), std: 0.02 }
    }

    pub fn weight(&mut self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| truncated_normal(&mut self.rng, self.std)).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn ones(&mut self, shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_arc(shape, Arc::new(vec![1.0; numel]))
    }

    /// Uniform in [lo, hi); used by tests that want spread-out values.
    pub fn uniform(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.register("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn grads_accumulate_until_reset() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::zeros(vec![3])).unwrap();
        store.accumulate_grad(id, &[1.0, 2.0, 3.0]);
        store.accumulate_grad(id, &[1.0, 1.0, 1.0]);
        assert_eq!(store.grad(id), &[2.0, 3.0, 4.0]);
        store.zero_grads();
        assert_eq!(store.grad(id), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn initializer_is_deterministic_and_truncated() {
        let mut a = Initializer::new(7);
        let mut b = Initializer::new(7);
        let ta = a.weight(vec![64]);
        let tb = b.weight(vec![64]);
        assert_eq!(ta.data(), tb.data());
        assert!(ta.data().iter().all(|v| v.abs() <= 0.04));
    }
}
