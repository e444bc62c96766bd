use serde::{Deserialize, Serialize};

use super::graph::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies accumulated gradients in a [`ParamStore`], then clears them.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for t in store.iter_mut().filter(|t| t.requires_grad) {
                    for (x, g) in t.values.iter_mut().zip(&t.grad) {
                        *x -= lr * g;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.m.is_empty() {
                    for (_, t) in store.iter() {
                        self.m.push(vec![0.0; t.len()]);
                        self.v.push(vec![0.0; t.len()]);
                    }
                }
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for ((t, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    if !t.requires_grad {
                        continue;
                    }
                    for i in 0..t.values.len() {
                        let g = t.grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        t.values[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad();
    }
}
