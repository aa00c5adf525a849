//! First-order optimizers over [`SplitModel`] parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ParamHandle, SplitModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    /// Plain SGD, no momentum.
    fn default() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: BTreeMap<ParamHandle, Vec<f64>>,
    second: BTreeMap<ParamHandle, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters absent from `grads` are untouched.
    pub fn step(&mut self, model: &mut SplitModel, grads: &[(ParamHandle, Vec<f64>)]) {
        self.steps += 1;
        let t = self.steps as f64;
        for (h, g) in grads {
            let p = model.param_mut(*h).data_mut();
            assert_eq!(p.len(), g.len(), "gradient length for {h}");
            match self.kind {
                OptimizerKind::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    if momentum == 0.0 && weight_decay == 0.0 {
                        for (w, gi) in p.iter_mut().zip(g) {
                            *w -= self.lr * gi;
                        }
                        continue;
                    }
                    let buf = self.first.entry(*h).or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..p.len() {
                        let d = g[i] + weight_decay * p[i];
                        buf[i] = momentum * buf[i] + d;
                        p[i] -= self.lr * buf[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(*h).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second.entry(*h).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
