use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{Grads, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Gradients keyed by parameter, summed across backward passes.
pub type GradMap<T> = BTreeMap<ParamId, Tensor<T>>;

pub fn accumulate<T: Real>(acc: &mut GradMap<T>, grads: &Grads<T>) {
    for (id, g) in grads.params() {
        match acc.get_mut(&id) {
            Some(a) => a.add_assign(g),
            None => {
                acc.insert(id, g.clone());
            }
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter and created on
/// first use; parameters without a gradient in a step are left alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        let mut map = GradMap::new();
        accumulate(&mut map, grads);
        self.apply(store, &map)
    }

    /// One update of every trainable parameter present in `grads`.
    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        if !(lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        self.t += 1;
        let bc1 = T::lit(1.0 - beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - beta2.powi(self.t as i32));
        let (b1, b2, eps, lr) = (T::lit(beta1), T::lit(beta2), T::lit(eps), T::lit(lr));
        let one = T::one();
        for (&id, g) in grads {
            if !store.get(id).trainable {
                continue;
            }
            let p = store.tensor_mut(id);
            if p.shape() != g.shape() {
                bail!(Dimension, "gradient shape {:?} for parameter {:?}", g.shape(), p.shape());
            }
            let (m, v) = self.moments.entry(id).or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (&id, (m, v)) in &self.moments {
            let name = &store.get(id).name;
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    /// Rebuilds optimizer state saved by [`Adam::state_tensors`].
    pub fn from_state(config: AdamConfig, t: u64, store: &ParamStore<T>, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)> = BTreeMap::new();
        for (name, tensor) in tensors {
            let (slot, param) = if let Some(p) = name.strip_prefix("adam.m.") {
                (0, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (1, p)
            } else {
                bail!(Format, "unexpected optimizer tensor {name}");
            };
            let Some(id) = store.id(param) else { bail!(Format, "optimizer state for unknown parameter {param}") };
            if tensor.shape() != store.tensor(id).shape() {
                bail!(Format, "optimizer state shape mismatch for {param}");
            }
            let entry = moments.entry(id).or_insert_with(|| (Tensor::zeros(&[0]), Tensor::zeros(&[0])));
            if slot == 0 {
                entry.0 = tensor.clone();
            } else {
                entry.1 = tensor.clone();
            }
        }
        if moments.values().any(|(m, v)| m.shape() != v.shape()) {
            bail!(Format, "incomplete optimizer state");
        }
        Ok(Adam { config, t, moments })
    }
}
