//! First-order optimizers over a parameter graph.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{GradMap, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    /// Gradient descent with classical momentum.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam,
}

impl OptimKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<OptimKind> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::config(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

/// Optimizer state lives outside the graph and is not checkpointed.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
    adam_m: BTreeMap<String, Vec<f64>>,
    adam_v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, momentum: f64) -> Result<Optimizer> {
        if lr < 0.0 {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Optimizer {
            kind,
            lr,
            momentum,
            velocity: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            t: 0,
        })
    }

    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer::new(OptimKind::Sgd, lr, 0.9).expect("valid defaults")
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update from a gradient map. Parameters with all-zero
    /// gradients and zero accumulated state are left bit-identical.
    pub fn step(&mut self, graph: &Graph, grads: &GradMap) -> Result<()> {
        self.t += 1;
        for (name, grad) in grads {
            let g = grad.values();
            let mut p = graph.param_value(name)?.values();
            match self.kind {
                OptimKind::Sgd => {
                    let v = self
                        .velocity
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let mut changed = false;
                    for i in 0..g.len() {
                        v[i] = self.momentum * v[i] + g[i];
                        if v[i] != 0.0 {
                            p[i] -= self.lr * v[i];
                            changed = true;
                        }
                    }
                    if changed && self.lr != 0.0 {
                        graph.set_param_data(name, p)?;
                    }
                }
                OptimKind::Adam => {
                    let m = self
                        .adam_m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let v = self
                        .adam_v
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                    let mut changed = false;
                    for i in 0..g.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        if m[i] != 0.0 {
                            let mh = m[i] / bc1;
                            let vh = v[i] / bc2;
                            p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                            changed = true;
                        }
                    }
                    if changed && self.lr != 0.0 {
                        graph.set_param_data(name, p)?;
                    }
                }
            }
        }
        Ok(())
    }
}
