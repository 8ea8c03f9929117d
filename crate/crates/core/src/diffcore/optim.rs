use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters with per-parameter momentum buffers.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// layout of checkpoints and the order of updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, (Tensor, Vec<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        tensor.set_requires_grad(true);
        tensor.zero_grad();
        let m = vec![0.0; tensor.numel()];
        self.params.insert(name.to_string(), (tensor, m));
        Ok(())
    }

    /// Inserts a tensor drawn from `N(0, std²)`.
    pub fn insert_gaussian<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), values)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|(t, _)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|(t, _)| t)
    }

    pub fn momentum(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(|(_, m)| m.as_slice())
    }

    pub(crate) fn set_momentum(&mut self, name: &str, m: Vec<f64>) -> Result<()> {
        let (t, slot) = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if m.len() != t.numel() {
            return Err(Error::invalid(format!("momentum size mismatch for {name:?}")));
        }
        *slot = m;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, (t, _))| (k.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|(t, _)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|(t, _)| t.zero_grad());
    }

    /// FNV-1a over the bit patterns of all parameter values in name order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, (t, _)) in &self.params {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.values() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}

/// SGD with heavy-ball momentum and optional L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl Sgd {
    /// `m ← momentum·m + (grad + wd·param)`; `param ← param − lr·m`; then grads are zeroed.
    pub fn step(&self, store: &mut ParamStore) {
        for (t, m) in store.params.values_mut() {
            let wd = self.weight_decay;
            let (lr, mu) = (self.lr, self.momentum);
            let grad = t.grad().to_vec();
            for ((p, mv), g) in t.values_mut().iter_mut().zip(m.iter_mut()).zip(grad) {
                *mv = mu * *mv + g + wd * *p;
                *p -= lr * *mv;
            }
            t.zero_grad();
        }
    }
}

pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64) {
    Sgd {
        lr,
        momentum,
        weight_decay: 0.0,
    }
    .step(store)
}
