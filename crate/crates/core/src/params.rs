use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Insertion-ordered collection of named parameter tensors.
///
/// Order is part of the contract: checkpoints, optimizer state and gradient
/// merges all walk parameters in store order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sub-store of every parameter whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if keep(n) {
                out.insert(n, t.clone());
            }
        }
        out
    }

    /// Copies every tensor of `other` into `self` (names must already exist
    /// with identical shapes).
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for (n, t) in other.iter() {
            let dst = self
                .get_mut(n)
                .ok_or_else(|| Error::shape(format!("no parameter `{n}` to assign into")))?;
            dst.check_same_shape(t, n)?;
            *dst = t.clone();
        }
        Ok(())
    }

    /// Checks that `other` has the same names, order and shapes.
    pub fn check_isomorphic(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape(format!(
                "parameter sets differ ({} vs {} entries)",
                self.len(),
                other.len()
            )));
        }
        for ((n, a), (_, b)) in self.iter().zip(other.iter()) {
            a.check_same_shape(b, n)?;
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise over isomorphic stores.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) -> Result<()> {
        self.check_isomorphic(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::scalar(1.0));
        s.insert("a", Tensor::scalar(2.0));
        s.insert("b", Tensor::scalar(3.0));
        assert_eq!(s.names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(s.get("b").unwrap().item(), 3.0);
    }

    #[test]
    fn add_scaled_requires_isomorphism() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(&[3]));
        assert!(a.add_scaled(&b, 1.0).is_err());
        b.insert("w", Tensor::full(&[2], 2.0));
        a.add_scaled(&b, 0.5).unwrap();
        assert_eq!(a.get("w").unwrap().data(), &[1.0, 1.0]);
    }
}
