//! Named parameter storage with trainability flags.
//!
//! Parameters keep their insertion order; every iteration over the store
//! (optimizer steps, checkpoint serialization, gradient checks) follows
//! that order, which is part of the determinism contract.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient; `None` until a backward pass writes one.
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::DuplicateParameter(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.order.push(name.to_string());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        if let Some(&i) = self.index.get(name) {
            Some(&mut self.params[i])
        } else {
            None
        }
    }

    /// Value of a parameter that is known to exist.
    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn try_value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| CoreError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_entries(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Total number of scalar entries across trainable parameters.
    pub fn trainable_entries(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient accumulator.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| CoreError::UnknownParameter(name.to_string()))?;
        assert_eq!(
            p.value.shape(),
            grad.shape(),
            "gradient shape mismatch for {name}"
        );
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = false;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::zeros(1, 1), true).unwrap();
        store.insert("a", Tensor::zeros(1, 1), true).unwrap();
        store.insert("c", Tensor::zeros(1, 1), false).unwrap();
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, vec!["b", "a", "c"]);
    }

    #[test]
    fn duplicate_insert_fails() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(1, 1), true).unwrap();
        assert!(store.insert("x", Tensor::zeros(1, 1), true).is_err());
    }

    #[test]
    fn grad_accumulation_adds() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(1, 2), true).unwrap();
        let g = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        store.accumulate_grad("w", &g).unwrap();
        store.accumulate_grad("w", &g).unwrap();
        let acc = store.get("w").unwrap().grad.as_ref().unwrap();
        assert_eq!(acc.data(), &[2.0, 4.0]);
    }

    #[test]
    fn freeze_prefix_only_touches_matches() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::zeros(1, 1), true).unwrap();
        store.insert("prompt.p", Tensor::zeros(1, 1), true).unwrap();
        store.freeze_prefix("enc.");
        assert!(!store.get("enc.w").unwrap().trainable);
        assert!(store.get("prompt.p").unwrap().trainable);
    }
}
