//! Gradient-descent optimizers over named parameter sets.
//!
//! Both optimizers update each parameter independently from its own
//! gradient, so results do not depend on iteration order; state is still
//! keyed by parameter name so that staged training (optimizing different
//! subsets per stage) keeps per-parameter moments intact.

use std::collections::BTreeMap;

use super::init::Parameter;
use crate::error::Result;

/// Plain stochastic gradient descent.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Sgd {
        Sgd { lr }
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&self, params: &[Parameter]) -> Result<()> {
        for p in params {
            let Some(g) = p.tensor().grad() else { continue };
            let mut v = p.tensor().to_vec();
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi -= self.lr * gi;
            }
            p.tensor().set_values(v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (applied directly to the values, not the
    /// gradient); 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and optional decoupled weight decay.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Apply one update to every parameter that has a gradient. Parameters
    /// without gradients keep their moment state untouched.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for p in params {
            let Some(g) = p.tensor().grad() else { continue };
            let (m, v) = self
                .state
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut x = p.tensor().to_vec();
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if c.weight_decay != 0.0 {
                    x[i] -= c.lr * c.weight_decay * x[i];
                }
                x[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            p.tensor().set_values(x)?;
        }
        Ok(())
    }
}
