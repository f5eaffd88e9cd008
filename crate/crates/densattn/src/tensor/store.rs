//! Named parameter storage with deterministic insertion order.

use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Ordered map of trainable parameters. Insertion order is stable, so the
/// element count and checkpoint layout are reproducible across runs given
/// the same construction sequence.
#[derive(Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register a tensor as a trainable parameter. The stored tensor has
    /// `requires_grad` set; the returned handle shares its buffer.
    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParameter { name: name.to_string() });
        }
        let param = Tensor::from_parts(tensor.shape(), tensor.to_vec(), true, None);
        self.params.insert(name.to_string(), param.clone());
        Ok(param)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn clear_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Overwrite a parameter's data in place. Handles held by model layers
    /// share the buffer and observe the update on their next forward.
    pub fn apply_update(&self, name: &str, new_data: &[f64]) -> Result<()> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid("apply_update", format!("unknown parameter `{name}`")))?;
        if new_data.len() != t.numel() {
            return Err(Error::shape(
                "apply_update",
                format!("parameter `{name}` has {} elements, got {}", t.numel(), new_data.len()),
            ));
        }
        t.inner.data.borrow_mut().copy_from_slice(new_data);
        Ok(())
    }

    /// Snapshot of all parameter data, in insertion order.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.to_vec()))
            .collect()
    }

    /// Restore parameter data from a snapshot taken on an identically
    /// shaped store.
    pub fn restore(&self, snapshot: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, data) in snapshot {
            self.apply_update(name, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn registration_is_ordered_and_counted() {
        let mut store = ParamStore::new();
        store.register("b", Tensor::zeros(Shape::new(1, 2, 1, 1))).unwrap();
        store.register("a", Tensor::zeros(Shape::new(1, 1, 3, 3))).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(store.total_elements(), 2 + 9);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        assert!(store.register("w", Tensor::zeros(Shape::new(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn updates_are_visible_through_shared_handles() {
        let mut store = ParamStore::new();
        let handle = store.register("w", Tensor::full(Shape::new(1, 1, 1, 2), 1.0)).unwrap();
        store.apply_update("w", &[3.0, 4.0]).unwrap();
        assert_eq!(handle.to_vec(), vec![3.0, 4.0]);
    }
}
