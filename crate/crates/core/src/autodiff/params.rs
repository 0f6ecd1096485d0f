use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Glorot uniform over `(fan_in, fan_out) = (rows, cols)`.
    Xavier,
    Gaussian { std: f64 },
    Constant(f64),
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, grad: None });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn create(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut Rng) -> Result<ParamId> {
        let n = rows * cols;
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(c) => vec![T::lit(c); n],
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect()
            }
            Init::Gaussian { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                (0..n).map(|_| T::lit(dist.sample(rng))).collect()
            }
        };
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Reset every gradient to an explicit zero tensor.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(existing) => existing.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
