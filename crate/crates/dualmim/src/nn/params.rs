//! Named parameter collections with deterministic iteration order.

use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Named tensors. Iteration is always in name order, so optimizer updates,
/// checkpoint layout, and gradient checks see parameters in the same order
/// on every run.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<(), NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::Config(format!("unknown parameter {name:?}")))
    }

    /// Replaces the value of an existing parameter. Shapes are fixed at
    /// construction; a mismatch is an error, not a resize.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<(), NnError> {
        let cur = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::Config(format!("unknown parameter {name:?}")))?;
        if cur.shape() != t.shape() {
            return Err(NnError::Shape(format!(
                "parameter {name:?} has shape {:?}, refusing {:?}",
                cur.shape(),
                t.shape()
            )));
        }
        *cur = t;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NnError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NnError::Config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Name-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn validate_finite(&self) -> Result<(), NnError> {
        for (name, t) in &self.entries {
            if !t.all_finite() {
                return Err(NnError::NonFinite(format!("parameter {name:?}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Zero tensors with the same names and shapes, e.g. optimizer state.
    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_name_ordered() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.insert("zeta", Tensor::zeros(&[2])).unwrap();
        ps.insert("alpha", Tensor::zeros(&[2])).unwrap();
        ps.insert("mid.key", Tensor::zeros(&[2])).unwrap();
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, vec!["alpha", "mid.key", "zeta"]);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(ps.set("w", Tensor::zeros(&[3, 2])).is_err());
        assert!(ps.set("w", Tensor::zeros(&[2, 3])).is_ok());
    }

    #[test]
    fn duplicate_insert_is_error() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[1])).is_err());
    }
}
