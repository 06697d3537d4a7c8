use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::nn::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(0.25) }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads.iter().flat_map(|g| g.data().iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>(),
    );
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips, then applies one bias-corrected Adam update. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, mut grads: Vec<Tensor<T>>) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::Shape { op: "adam", lhs: [params.len(), 1], rhs: [grads.len(), 1] });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - libm::pow(c.beta1, self.t as f64));
        let bc2 = T::of(1.0 - libm::pow(c.beta2, self.t as f64));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
