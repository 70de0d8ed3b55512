//! Adam with bias correction and optional decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FsdError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    pub step: u64,
    lrs: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<'a>(settings: AdamSettings, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.len()).collect();
        Adam {
            lrs: vec![settings.lr; sizes.len()],
            settings,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Overrides the learning rate of parameter `index`.
    pub fn set_lr(&mut self, index: usize, lr: f64) {
        self.lrs[index] = lr;
    }

    /// One update. `grads[i]` is `None` when parameter `i` received no gradient,
    /// which is treated as a zero gradient.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(FsdError::shape("adam", "parameter count changed"));
        }
        self.step += 1;
        let s = &self.settings;
        let bc1 = 1.0 - s.beta1.powi(self.step as i32);
        let bc2 = 1.0 - s.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, lr) = (&mut self.m[i], &mut self.v[i], self.lrs[i]);
            if p.len() != m.len() {
                return Err(FsdError::shape("adam", format!("parameter {i} changed size")));
            }
            let g = grads[i].as_ref().map(|g| g.data());
            if g.is_some_and(|g| g.len() != m.len()) {
                return Err(FsdError::shape("adam", format!("gradient {i} has the wrong size")));
            }
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let decay = if s.weight_decay > 0.0 { lr * s.weight_decay * *w } else { 0.0 };
                *w -= lr * mhat / (vhat.sqrt() + s.eps) + decay;
            }
            if !p.all_finite() {
                return Err(FsdError::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}
