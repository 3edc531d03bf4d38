//! Gradient descent with global-norm clipping, plain or with Adam moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradBuffer, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::Sgd,
            lr: 1e-3,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.clip >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state. Adam moments are keyed by parameter name so they
/// survive checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update from `grads`; returns the gradient norm before
    /// clipping. Non-finite gradients are rejected without touching the
    /// parameters.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::NonFinite { op: "optimizer step" });
        }
        let norm = grads.norm();
        let c = &self.config;
        let clip = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (c.beta1, c.beta2);
        let (corr1, corr2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            let Some(g) = grads.get(id) else { continue };
            let w = store.get_mut(id).data_mut();
            match c.kind {
                OptimKind::Sgd => {
                    for (x, gi) in w.iter_mut().zip(g) {
                        *x -= c.lr * clip * gi;
                    }
                }
                OptimKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name)
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    for i in 0..g.len() {
                        let gi = g[i] * clip;
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        w[i] -= c.lr * (m[i] / corr1) / ((v[i] / corr2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(norm)
    }
}
