use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One trainable matrix with its gradient and Adam moment slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let (r, c) = value.dims();
        Param {
            grad: Tensor::zeros(r, c),
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            value,
        }
    }
}

/// Named trainable parameters, enumerated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    /// Adam step counter.
    pub(crate) step: u64,
    /// Set once gradients have been accumulated since the last zeroing.
    pub(crate) has_grads: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    /// Inserts a `rows×cols` matrix drawn from `N(0, std²)`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    /// Glorot-uniform initialization for a `fan_in×fan_out` weight.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
        self.has_grads = false;
    }

    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if !p.grad.same_shape(g) {
            return Err(Error::Dimension(format!(
                "gradient {:?} for {name} of shape {:?}",
                g.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(g);
        self.has_grads = true;
        Ok(())
    }

    pub fn accumulate(&mut self, grads: &super::tape::Gradients) -> Result<()> {
        for (name, g) in &grads.params {
            self.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.scale_assign(s);
        }
    }

    /// Parameter values only, in name order.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    pub fn from_values(values: BTreeMap<String, Tensor>) -> Self {
        ParamStore {
            params: values.into_iter().map(|(k, v)| (k, Param::new(v))).collect(),
            step: 0,
            has_grads: false,
        }
    }
}
