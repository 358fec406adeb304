use std::collections::HashMap;

use super::{ParamId, ParamStore};
use crate::error::{MuseError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr: f64,
    /// Classic L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            method: Method::Sgd,
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            method: Method::adam(),
            lr,
            weight_decay: 0.0,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Updates a fixed set of parameters in place. Parameters without a gradient
/// (unreached from the loss, or frozen) are left untouched.
pub struct Optimizer {
    config: OptimizerConfig,
    ids: Vec<ParamId>,
    moments: HashMap<ParamId, Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, ids: Vec<ParamId>) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(MuseError::Config(format!(
                "learning rate must be positive and finite, got {}",
                config.lr
            )));
        }
        if config.weight_decay < 0.0 {
            return Err(MuseError::Config("weight decay must be non-negative".into()));
        }
        Ok(Optimizer {
            config,
            ids,
            moments: HashMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.config.lr;
        let wd = self.config.weight_decay;
        for &id in &self.ids {
            let p = store.get(id);
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let w = p.value.data();
            let g: Vec<f64> = grad.data().iter().zip(w).map(|(&g, &w)| g + wd * w).collect();
            let shape = p.value.shape().to_vec();
            let updated: Vec<f64> = match self.config.method {
                Method::Sgd => w.iter().zip(&g).map(|(w, g)| w - lr * g).collect(),
                Method::Adam { beta1, beta2, eps } => {
                    let mo = self.moments.entry(id).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    if mo.m.len() != g.len() {
                        mo.m = vec![0.0; g.len()];
                        mo.v = vec![0.0; g.len()];
                    }
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    (0..g.len())
                        .map(|i| {
                            mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
                            mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
                            let mhat = mo.m[i] / bc1;
                            let vhat = mo.v[i] / bc2;
                            w[i] - lr * mhat / (vhat.sqrt() + eps)
                        })
                        .collect()
                }
            };
            store.set_value(id, super::Tensor::from_parts(shape, updated));
        }
    }
}
