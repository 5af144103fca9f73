use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 0.01,
            beta1: 0.8,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() || !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("invalid ADAM hyperparameters {self:?}")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("ADAM epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// One moment buffer per tensor of the given sizes.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the step counter; call once before updating the tensors of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected update of tensor `index` in place.
    pub fn update(&mut self, index: usize, params: &mut [f64], grads: &[f64]) {
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        assert_eq!(m.len(), params.len(), "moment shape must match parameter shape");
        for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            *p -= alpha * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
        }
    }
}
