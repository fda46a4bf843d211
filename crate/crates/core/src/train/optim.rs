//! SGD with momentum and decoupled-from-BN weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: default_momentum(), weight_decay: default_weight_decay() }
    }
}

/// Optimizer state: one velocity buffer per parameter, created on first use.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, velocity: Vec::new() }
    }

    pub fn velocity(&self, id: usize) -> Option<&[T]> {
        self.velocity.get(id).and_then(|v| v.as_deref())
    }

    pub fn set_velocity(&mut self, id: usize, v: Vec<T>) {
        if self.velocity.len() <= id {
            self.velocity.resize(id + 1, None);
        }
        self.velocity[id] = Some(v);
    }

    /// `v = m*v + g + wd*p` (decay on conv weights only), then `p -= lr*v`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) =
            params.iter().map(|(_, p)| p).find(|p| p.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let m = T::from_f64_lossy(self.config.momentum);
        let wd = T::from_f64_lossy(self.config.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for (id, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.as_ref() else { continue };
            if !p.kind.trainable() {
                continue;
            }
            let decay = p.kind.decays() && wd != T::zero();
            let value = p.value.data();
            let v = self.velocity[id].get_or_insert_with(|| vec![T::zero(); value.len()]);
            let mut next = Vec::with_capacity(value.len());
            for i in 0..value.len() {
                let mut step = grad[i];
                if decay {
                    step += wd * value[i];
                }
                v[i] = m * v[i] + step;
                next.push(value[i] - lr * v[i]);
            }
            p.value = Tensor::from_parts(p.value.shape().to_vec(), next);
        }
        Ok(())
    }

    /// Velocity buffers keyed by parameter name, for checkpointing.
    pub fn state(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        params
            .iter()
            .filter_map(|(id, p)| {
                let v = self.velocity(id)?;
                Some((
                    format!("optimizer.velocity.{}", p.name),
                    Tensor::from_parts(p.value.shape().to_vec(), v.to_vec()),
                ))
            })
            .collect()
    }
}
