use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Coupled L2 decay: the step uses `g + weight_decay · θ`.
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-2,
        }
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Sgd {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::mismatch("optimizer step", params.len(), grads.len()));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let g = g + weight_decay * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}
