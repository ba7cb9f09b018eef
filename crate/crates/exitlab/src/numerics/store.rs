//! Named parameter storage with gradient buffers and a version counter.
//!
//! Models register tensors under stable string names; optimizers mutate them
//! in place and bump the version so on-policy consumers can detect stale
//! rollouts. Registration order is preserved, which makes checkpoints and
//! checksums deterministic.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tensor::{Element, Tensor};

/// Stable handle for one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param<E: Element> {
    name: String,
    value: Tensor<E>,
    grad: Tensor<E>,
}

/// Ordered collection of named parameters with matching gradient buffers.
#[derive(Debug, Clone)]
pub struct ParameterStore<E: Element> {
    params: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
    version: u64,
}

impl<E: Element> Default for ParameterStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParameterStore<E> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            version: 0,
        }
    }

    /// Registers a tensor under `name`. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].grad
    }

    /// Adds `scale * delta` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<E>, scale: E) -> Result<()> {
        let param = &mut self.params[id.0];
        if param.grad.shape() != delta.shape() {
            return Err(Error::Internal(format!(
                "gradient shape {} does not match parameter {:?} of shape {}",
                delta.shape_string(),
                param.name,
                param.grad.shape_string()
            )));
        }
        param.grad.add_assign_scaled(delta, scale);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(E::ZERO);
        }
    }

    /// Monotone counter incremented on every optimizer step.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Iterates `(name, value)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Hex digest over names, shapes, and exact value bits, in registration
    /// order. Used to assert that frozen models stay frozen.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            hasher.update((p.value.rows() as u64).to_le_bytes());
            hasher.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                hasher.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Converts element type; gradients reset to zero, version resets.
    pub fn cast<F: Element>(&self) -> ParameterStore<F> {
        let mut out = ParameterStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast::<F>())
                .expect("names are unique in the source store");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_rejects_duplicate_names() {
        let mut store = ParameterStore::<f32>::new();
        store.register("w", Tensor::zeros(2, 2)).unwrap();
        assert!(store.register("w", Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn checksum_tracks_value_changes() {
        let mut store = ParameterStore::<f32>::new();
        let id = store.register("w", Tensor::zeros(2, 2)).unwrap();
        let before = store.checksum();
        assert_eq!(before, store.checksum());
        store.value_mut(id).set(0, 0, 1.0);
        assert_ne!(before, store.checksum());
    }

    #[test]
    fn accumulate_grad_scales_and_adds() {
        let mut store = ParameterStore::<f64>::new();
        let id = store.register("w", Tensor::zeros(1, 2)).unwrap();
        let delta = Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        store.accumulate_grad(id, &delta, 0.5).unwrap();
        store.accumulate_grad(id, &delta, 1.0).unwrap();
        assert_eq!(store.grad(id).data(), &[1.5, -3.0]);
    }
}
