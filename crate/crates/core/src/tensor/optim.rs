use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamSet};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant learning rate.
///
/// Moment buffers are kept per parameter position and are only touched for
/// parameters that receive a gradient and are not frozen.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    steps: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        Adam {
            cfg,
            steps: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer built for {} parameters, got {} gradients for {} parameters",
                self.m.len(),
                grads.grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        if self.cfg.lr == 0.0 {
            return Ok(());
        }
        let t = self.steps as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let lr = T::lit(self.cfg.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let eps = T::lit(self.cfg.eps * bc2.sqrt());
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.at_mut(i);
            if p.frozen {
                continue;
            }
            if g.len() != p.tensor.numel() {
                return Err(Error::NamedTensor {
                    name: p.name.clone(),
                    reason: format!("gradient has {} entries, parameter {}", g.len(), p.tensor.numel()),
                });
            }
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= lr * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
