use indexmap::IndexMap;

use crate::error::{contract, Result};
use crate::numerics::Matrix;

/// Gradients keyed by parameter name.
pub type Grads = IndexMap<String, Matrix>;

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return contract(format!("duplicate parameter name {name:?}"));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        match self.tensors.get(name) {
            Some(m) => Ok(m),
            None => contract(format!("no parameter named {name:?}")),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar entries across all parameters.
    pub fn entries(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Zero gradient for every parameter.
    pub fn zeros_like(&self) -> Grads {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_uniqueness() {
        let mut p = ParamStore::new();
        p.insert("b", Matrix::zeros(1, 2)).unwrap();
        p.insert("a", Matrix::zeros(2, 2)).unwrap();
        assert!(p.insert("b", Matrix::zeros(1, 1)).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(p.entries(), 6);
        assert!(p.get("c").is_err());
    }
}
