use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

/// Named trainable tensors with gradient buffers.
///
/// Gradients accumulate: [`ParamStore::accumulate`] adds into the existing
/// buffers and only [`ParamStore::zero_grad`] clears them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F = f32> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name, which is always a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<F>)]) {
        for (id, g) in grads {
            let buf = self.params[id.0].grad.data_mut();
            assert_eq!(buf.len(), g.len());
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    /// Multiplies every gradient buffer by `s`.
    pub fn scale_grads(&mut self, s: F) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_params_with_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = F::zero());
                n += 1;
            }
        }
        n
    }

    /// Copy of the store in another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out.add(p.name.clone(), p.value.cast());
            *out.grad_mut(id) = p.grad.cast();
        }
        out
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Overwrites values from `other` for every name present in both stores.
    /// Returns the number of parameters copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<F>) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.id(&p.name) {
                let src = other.value(src);
                if src.shape() != p.value.shape() {
                    return Err(Error::shape("copy_matching_from", p.value.shape(), src.shape()));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Loads values by name; every parameter of `self` must be present.
    pub fn load_named<'a>(
        &mut self,
        named: impl IntoIterator<Item = (&'a str, &'a Tensor<F>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in named {
            if let Some(id) = self.id(name) {
                let p = &mut self.params[id.0];
                if p.value.shape() != t.shape() {
                    return Err(Error::shape("load_named", p.value.shape(), t.shape()));
                }
                p.value = t.clone();
                seen[id.0] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!(
                "missing parameter {} in checkpoint",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_adds_until_zeroed() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros(vec![2]));
        s.accumulate(&[(id, vec![1.0, 2.0])]);
        s.accumulate(&[(id, vec![1.0, 2.0])]);
        assert_eq!(s.grad(id).data(), &[2.0, 4.0]);
        s.zero_grad();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic]
    fn duplicate_names_panic() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(vec![1]));
        s.add("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn load_named_requires_every_param() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![1]));
        s.add("b", Tensor::zeros(vec![1]));
        let a = Tensor::full(vec![1], 3.0);
        assert!(s.load_named([("a", &a)]).is_err());
        s.load_named([("a", &a), ("b", &a)]).unwrap();
        assert_eq!(s.value(s.id("b").unwrap()).data(), &[3.0]);
    }
}
