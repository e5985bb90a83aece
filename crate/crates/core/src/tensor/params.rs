use std::collections::HashMap;

use indexmap::IndexMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<F> {
    tensors: IndexMap<String, Tensor<F>>,
    pub rng_seed: u64,
}

impl<F: Float> Parameters<F> {
    pub fn new(rng_seed: u64) -> Self {
        Parameters {
            tensors: IndexMap::new(),
            rng_seed,
        }
    }

    /// Registers a tensor; returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<usize> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (i, _) = self.tensors.insert_full(name, t);
        Ok(i)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn by_index(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        self.tensors.get_index(i).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> Parameters<G> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            rng_seed: self.rng_seed,
        }
    }
}

/// Dense gradient buffers aligned with a [`Parameters`] set.
#[derive(Clone, Debug)]
pub struct ParamGrads<F> {
    pub grads: Vec<Vec<F>>,
}

impl<F: Float> ParamGrads<F> {
    pub fn zeros_like(params: &Parameters<F>) -> Self {
        ParamGrads {
            grads: params
                .iter()
                .map(|(_, t)| vec![F::zero(); t.numel()])
                .collect(),
        }
    }

    /// Adds `scale * g` for every parameter present in `map`.
    pub fn accumulate(&mut self, map: &HashMap<usize, Tensor<F>>, scale: F) {
        for (&i, g) in map {
            for (o, &v) in self.grads[i].iter_mut().zip(g.data()) {
                *o += scale * v;
            }
        }
    }

    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<F>()
            .sqrt()
    }

    pub fn scale(&mut self, c: F) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}
