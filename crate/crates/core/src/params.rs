//! Named parameter storage and binding onto a graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Replaces every tensor with one of identical name and shape from `other`.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: expected {}, got {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, dst), (oname, src)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname || dst.shape() != src.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` {:?} does not match `{oname}` {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph variables for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds existing graph variables, one per stored parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weight initializer drawing from a seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn fan_in_uniform<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)))
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_counts_and_binds() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2, 3]));
        let b = s.add("b", Tensor::zeros(&[4]));
        assert_eq!(s.numel(), 10);
        assert_eq!(s.find("b"), Some(b));
        let mut g = Graph::new();
        let bound = s.bind(&mut g, true);
        assert_eq!(g.shape(bound.var(a)), &[2, 3]);
        assert!(g.requires_grad(bound.var(b)));
    }

    #[test]
    fn assign_rejects_shape_change() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2]));
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(&[3]));
        assert!(s.assign_from(&other).is_err());
    }
}
