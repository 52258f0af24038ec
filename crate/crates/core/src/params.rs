use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Named trainable tensors, iterated in sorted-name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), Entry { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// `(name, value, grad)` triples for optimizers.
    pub fn iter_mut_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.value, &e.grad))
    }

    pub fn grads_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.values_mut().map(|e| &mut e.grad)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        if e.grad.shape() != g.shape() {
            return Err(Error::shape("accumulate_grad", e.grad.shape(), g.shape()));
        }
        e.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Glorot-uniform matrix `fan_in × fan_out`.
pub fn xavier<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("matching size")
}

pub fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("matching size")
}
