//! Learnable parameters, their registry and the Adam update.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{config_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with its gradient and Adam moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<R: Real> {
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    pub adam_m: Tensor<R>,
    pub adam_v: Tensor<R>,
    pub step_count: u64,
}

impl<R: Real> ParamTensor<R> {
    pub fn new(value: Tensor<R>) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Self {
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
    }
}

/// Named parameter registry. Ids are dense indices; names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real> {
    entries: Vec<(String, ParamTensor<R>)>,
    by_name: BTreeMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push((name, ParamTensor::new(value)));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<R> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<R> {
        &mut self.entries[id.0].1
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.entries[id.0].1.value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Parameters in name order.
    pub fn iter_by_name(&self) -> impl Iterator<Item = (&str, &ParamTensor<R>)> {
        self.by_name
            .iter()
            .map(|(n, id)| (n.as_str(), &self.entries[id.0].1))
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, p)| p.zero_grad());
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let (name, p) = &mut self.entries[id.0];
        if p.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        ParamTensor {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            adam_m: p.adam_m.cast(),
                            adam_v: p.adam_v.cast(),
                            step_count: p.step_count,
                        },
                    )
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// How a weight tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
}

/// Initializes a tensor with an RNG derived from `(seed, name)`, so a
/// parameter's initial value does not depend on what else is registered.
pub fn init_tensor<R: Real>(shape: &[usize], init: Init, seed: u64, name: &str) -> Tensor<R> {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Glorot { fan_in, fan_out } => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
            Tensor::uniform(shape.to_vec(), -bound, bound, &mut rng)
        }
    }
}

/// FNV-1a over the name, mixed with the seed.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step over every parameter, then zeroes the grads.
pub fn adam_step<R: Real>(store: &mut ParamStore<R>, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(config_err!("learning rate must be positive, got {}", cfg.lr));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.eps <= 0.0 {
        return Err(config_err!("invalid Adam hyperparameters {cfg:?}"));
    }
    let (b1, b2) = (R::of(cfg.beta1), R::of(cfg.beta2));
    let one = R::one();
    for (_, p) in store.entries.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = R::of(1.0 - cfg.beta1.powi(t));
        let bc2 = R::of(1.0 - cfg.beta2.powi(t));
        let lr = R::of(cfg.lr);
        let eps = R::of(cfg.eps);
        let ParamTensor {
            value,
            grad,
            adam_m,
            adam_v,
            ..
        } = p;
        for (((w, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(adam_m.data_mut().iter_mut())
            .zip(adam_v.data_mut().iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
            *g = R::zero();
        }
    }
    Ok(())
}
