//! Optimizers and learning-rate schedules.
//!
//! Updates follow the usual deep-learning conventions: SGD folds weight
//! decay into the gradient before the momentum buffer; AdamW decays the
//! parameter directly (decoupled) and uses bias-corrected moments. State is
//! keyed by parameter name, so a single optimizer can drive any named
//! collection of tensors and leaves names it never sees untouched.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Update rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimMethod {
    Sgd { momentum: f32 },
    #[serde(rename = "adamw")]
    AdamW { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimMethod {
    /// SGD with the customary 0.9 momentum.
    pub fn sgd() -> Self {
        OptimMethod::Sgd { momentum: 0.9 }
    }

    /// AdamW with the customary (0.9, 0.999, 1e-8) moments.
    pub fn adamw() -> Self {
        OptimMethod::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning-rate schedule, evaluated once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate at epoch 0 toward 0 at `total`.
    Cosine,
    /// Multiply by `gamma` at each milestone epoch.
    MultiStep { milestones: Vec<usize>, gamma: f32 },
}

/// A complete optimizer recipe: rule, base rate, decay, schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub method: OptimMethod,
    pub lr: f32,
    pub weight_decay: f32,
    pub schedule: Schedule,
}

impl OptimConfig {
    pub fn sgd(lr: f32, weight_decay: f32, schedule: Schedule) -> Self {
        Self { method: OptimMethod::sgd(), lr, weight_decay, schedule }
    }

    pub fn adamw(lr: f32, weight_decay: f32, schedule: Schedule) -> Self {
        Self { method: OptimMethod::adamw(), lr, weight_decay, schedule }
    }

    /// Learning rate for `epoch` of a `total`-epoch run.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f32 {
        match &self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = epoch as f32 / total.max(1) as f32;
                0.5 * self.lr * (1.0 + (std::f32::consts::PI * t).cos())
            }
            Schedule::MultiStep { milestones, gamma } => {
                let hits = milestones.iter().filter(|&&m| m <= epoch).count();
                self.lr * gamma.powi(hits as i32)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct ParamState {
    /// SGD momentum buffer, or AdamW first moment.
    m: Vec<f32>,
    /// AdamW second moment.
    v: Vec<f32>,
    /// AdamW step counter.
    t: i32,
}

/// Stateful optimizer over named flat tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    method: OptimMethod,
    weight_decay: f32,
    state: BTreeMap<String, ParamState>,
}

impl Optimizer {
    pub fn new(config: &OptimConfig) -> Self {
        Self {
            method: config.method.clone(),
            weight_decay: config.weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to a parameter tensor. State for each `name` is
    /// created on first use and must keep its length afterwards.
    pub fn step(&mut self, name: &str, lr: f32, param: &mut [f32], grad: &[f32]) {
        assert_eq!(param.len(), grad.len(), "{name}: param/grad length mismatch");
        let st = self.state.entry(name.to_string()).or_default();
        let wd = self.weight_decay;
        match self.method {
            OptimMethod::Sgd { momentum } => {
                if st.m.is_empty() {
                    st.m = vec![0.0; param.len()];
                }
                assert_eq!(st.m.len(), param.len(), "{name}: state length changed");
                for ((p, &g0), buf) in param.iter_mut().zip(grad).zip(&mut st.m) {
                    let g = g0 + wd * *p;
                    *buf = momentum * *buf + g;
                    *p -= lr * *buf;
                }
            }
            OptimMethod::AdamW { beta1, beta2, eps } => {
                if st.m.is_empty() {
                    st.m = vec![0.0; param.len()];
                    st.v = vec![0.0; param.len()];
                }
                assert_eq!(st.m.len(), param.len(), "{name}: state length changed");
                st.t += 1;
                let bc1 = 1.0 - beta1.powi(st.t);
                let bc2 = 1.0 - beta2.powi(st.t);
                for (i, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
                    *p -= lr * wd * *p;
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    let mhat = st.m[i] / bc1;
                    let vhat = st.v[i] / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
