//! Adam with an optional cosine-annealed learning rate.

use crate::array::Array;
use crate::error::{DiffError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total scheduled steps; the cosine schedule reaches `lr_min` here.
    pub total_steps: usize,
    pub cosine: bool,
    pub lr_min: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 2000,
            cosine: true,
            lr_min: 0.0,
        }
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2`, held at
/// `lr_min` once `t >= T`.
pub fn cosine_annealing(lr_max: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let progress = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Optimizer state: step counter and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: usize,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Array]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    /// Rebuilds an optimizer from saved moments, e.g. to resume training.
    pub fn restore(config: AdamConfig, step: usize, m: Vec<Array>, v: Vec<Array>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(DiffError::InvalidArgument(
                "adam: moment buffers disagree".into(),
            ));
        }
        Ok(Self { config, step, m, v })
    }

    /// First and second moment buffers.
    pub fn moments(&self) -> (&[Array], &[Array]) {
        (&self.m, &self.v)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate that the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        if self.config.cosine {
            cosine_annealing(
                self.config.lr,
                self.config.lr_min,
                self.step,
                self.config.total_steps,
            )
        } else {
            self.config.lr
        }
    }

    /// Applies one bias-corrected update in place and returns the learning
    /// rate that was used.
    pub fn step(&mut self, params: &mut [Array], grads: &[&Array]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(DiffError::InvalidArgument(format!(
                "adam: {} moment buffers, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = self.current_lr();
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
