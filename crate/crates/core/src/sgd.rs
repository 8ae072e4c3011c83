//! Stochastic gradient descent with momentum, weight decay, and a
//! cosine-annealed learning-rate schedule.

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_min: 1e-5,
        }
    }
}

/// Cosine annealing from `base` at epoch 0 down to `min` at the final
/// epoch. A single-epoch run stays at `base`.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return base;
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Default)]
pub struct Sgd {
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over all trainable parameters holding a gradient:
    /// g ← grad + wd·θ; v ← μ·v + g; θ ← θ − lr·v.
    /// Iteration follows store insertion order for reproducibility.
    pub fn step(&mut self, store: &mut ParamStore, config: &SgdConfig, lr: f64) {
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.rows(), p.value.cols()));
            for ((vv, &g), th) in v
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(p.value.data_mut())
            {
                *vv = config.momentum * *vv + g + config.weight_decay * *th;
                *th -= lr * *vv;
            }
        }
    }
}
