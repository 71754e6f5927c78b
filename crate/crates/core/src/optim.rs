//! First-order optimizers over a parameter registry's gradient slots.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with optional heavy-ball momentum (0 disables it).
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Rescale the gradient so its global L2 norm is at most this.
    pub max_grad_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive, got {n}"
                )));
            }
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => Err(
                Error::Config(format!("momentum must be in [0, 1), got {momentum}")),
            ),
            OptimizerKind::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                Err(Error::Config(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Accumulates `grads` into the tensors' gradient slots, takes one
    /// descent step, and clears the slots. Returns the pre-clipping norm.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) -> f64 {
        grads.accumulate_into(params);
        let norm = params
            .iter()
            .filter_map(Tensor::grad)
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        if self.m.len() != params.len() {
            self.m = params.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let lr = self.cfg.lr;
        for (i, t) in params.iter_mut().enumerate() {
            let Some(g) = t
                .grad()
                .map(|g| g.iter().map(|x| x * clip).collect::<Vec<f64>>())
            else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = t.data_mut();
            match self.cfg.kind {
                OptimizerKind::Sgd { momentum } => {
                    for j in 0..g.len() {
                        m[j] = momentum * m[j] + g[j];
                        data[j] -= lr * m[j];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    for j in 0..g.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
            t.zero_grad();
        }
        norm
    }
}
