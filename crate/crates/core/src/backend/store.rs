use std::collections::BTreeMap;

use rand::Rng;

use super::{BackendError, Float, Graph, Result, Tensor};

/// Named trainable arrays with paired gradient buffers.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// order of optimizer updates and checkpoint entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    values: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            values: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(BackendError::DuplicateParam(name));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter values and gradients together, for updates.
    pub fn iter_with_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Tensor<T>)> {
        self.values
            .iter_mut()
            .zip(self.grads.values_mut())
            .map(|((k, v), g)| (k.as_str(), v, g))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds the gradients of every parameter registered on `graph` (after its
    /// backward pass) into this store's buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (name, var) in graph.params() {
            if let (Some(g), Some(buf)) = (graph.grad(var), self.grads.get_mut(name)) {
                for (b, &d) in buf.data_mut().iter_mut().zip(g) {
                    *b = *b + d;
                }
            }
        }
    }

    /// Adds every parameter of `other` (names must not collide).
    pub fn extend(&mut self, other: ParameterStore<T>) -> Result<()> {
        for (name, value) in other.values {
            self.insert(name, value)?;
        }
        Ok(())
    }

    /// Copy with every value converted to `U`; gradients reset to zero.
    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (k, v) in &self.values {
            out.insert(k.clone(), v.cast()).expect("names are unique");
        }
        out
    }

    /// Subset of parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert(k.clone(), v.clone()).expect("names are unique");
        }
        out
    }
}

/// Normal(0, std) initialization via Box-Muller.
pub fn init_normal<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen();
            T::lit(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
