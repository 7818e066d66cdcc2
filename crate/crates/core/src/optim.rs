//! Adam with linear warmup.

use serde::{Deserialize, Serialize};

use crate::model::Param;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 400,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for update number `step` (1-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<R> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

pub fn grad_norm<R: Real>(grads: &[Vec<R>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs<R: Real>(grads: &[Vec<R>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.to_f64().unwrap_or(f64::NAN).abs())
        .fold(0.0, f64::max)
}

impl<R: Real> Adam<R> {
    pub fn new(config: OptimizerConfig, params: &[Param<R>]) -> Self {
        let zeros = || params.iter().map(|p| vec![R::zero(); p.tensor.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Param<R>], grads: &[Vec<R>]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let c = &self.config;
        let clip = match c.grad_clip {
            Some(limit) => {
                let norm = grad_norm(grads);
                if norm > limit {
                    R::lit(limit / norm)
                } else {
                    R::one()
                }
            }
            None => R::one(),
        };
        let lr = R::lit(c.rate_at(self.step));
        let (b1, b2) = (R::lit(c.beta1), R::lit(c.beta2));
        let one = R::one();
        let bias1 = one - R::lit(c.beta1.powi(self.step as i32));
        let bias2 = one - R::lit(c.beta2.powi(self.step as i32));
        let eps = R::lit(c.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
