//! Named parameters, their gradients, and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradients for a subset of a store's parameters, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    /// Elementwise sum. A parameter present on either side is present in the result.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Named parameter tensors in insertion order, with Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.m.push(Tensor::zeros(value.shape()));
        self.v.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.grads.push(None);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Glorot-uniform weight in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.v[id.0]
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor) -> Result<()> {
        let shape = self.values[id.0].shape();
        if m.shape() != shape || v.shape() != shape {
            return Err(Error::dim("moments", shape, m.shape()));
        }
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Replaces all gradient buffers. Nothing accumulates across calls.
    pub fn set_grads(&mut self, grads: ParamGrads) -> Result<()> {
        if grads.grads.len() != self.len() {
            return Err(Error::Contract(format!(
                "gradient set covers {} parameters, store has {}",
                grads.grads.len(),
                self.len()
            )));
        }
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.values[i].shape() {
                    return Err(Error::dim("set_grads", self.values[i].shape(), g.shape()));
                }
            }
        }
        self.grads = grads.grads;
        Ok(())
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let k = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= k);
            }
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if let Some(i) = self.grads.iter().position(Option::is_none) {
            return Err(Error::Contract(format!(
                "missing gradient for parameter {}",
                self.names[i]
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = self.grads[i].as_ref().unwrap().data();
            let m = self.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, w) in self.values[i].data_mut().iter_mut().enumerate() {
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
