use serde::{Deserialize, Serialize};

use crate::error::{GfError, Result};
use crate::numcore::tensor::Tensor;

/// Which update rule a parameter group follows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptKind {
    SgdNesterov { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine { total_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    #[serde(flatten)]
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn sgd_nesterov(lr: f32, momentum: f32, weight_decay: f32, total_steps: usize) -> Self {
        OptimizerConfig {
            kind: OptKind::SgdNesterov { momentum },
            learning_rate: lr,
            weight_decay,
            schedule: Schedule::Cosine { total_steps },
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate: lr,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(GfError::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Learning rate at a given step. The cosine schedule never dips
    /// below zero and is non-increasing over its horizon.
    pub fn lr_at(&self, step: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine { total_steps } => {
                let t = (step.min(total_steps)) as f64 / total_steps.max(1) as f64;
                (self.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
                    as f32
            }
        }
    }
}

enum OptState {
    Sgd { momentum_buf: Vec<Vec<f32>> },
    Adam { m: Vec<Vec<f32>>, v: Vec<Vec<f32>> },
}

/// Per-group optimizer state. One group updates one set of tensors with a
/// shared config; step index advances once per `step` call.
pub struct Optimizer {
    pub config: OptimizerConfig,
    state: OptState,
    step_index: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, param_sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        let bufs = || param_sizes.iter().map(|&s| vec![0.0f32; s]).collect();
        let state = match config.kind {
            OptKind::SgdNesterov { .. } => OptState::Sgd {
                momentum_buf: bufs(),
            },
            OptKind::Adam { .. } => OptState::Adam {
                m: bufs(),
                v: bufs(),
            },
        };
        Ok(Optimizer {
            config,
            state,
            step_index: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn current_lr(&self) -> f32 {
        self.config.lr_at(self.step_index)
    }

    /// Apply one update. `params` and `grads` pair up positionally and must
    /// match the sizes given at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GfError::input(format!(
                "optimizer step: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        let lr = self.config.lr_at(self.step_index);
        let wd = self.config.weight_decay;
        match (&self.config.kind, &mut self.state) {
            (OptKind::SgdNesterov { momentum }, OptState::Sgd { momentum_buf }) => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(momentum_buf.iter_mut()) {
                    debug_assert_eq!(p.numel(), g.len());
                    for ((pv, &gv), bv) in
                        p.data_mut().iter_mut().zip(g.iter()).zip(buf.iter_mut())
                    {
                        let mut d = gv + wd * *pv;
                        *bv = momentum * *bv + d;
                        d += momentum * *bv;
                        *pv -= lr * d;
                    }
                }
            }
            (OptKind::Adam { beta1, beta2, eps }, OptState::Adam { m, v }) => {
                let t = (self.step_index + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), mb), vb) in
                    params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut())
                {
                    debug_assert_eq!(p.numel(), g.len());
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.iter())
                        .zip(mb.iter_mut())
                        .zip(vb.iter_mut())
                    {
                        let d = gv + wd * *pv;
                        *mv = beta1 * *mv + (1.0 - beta1) * d;
                        *vv = beta2 * *vv + (1.0 - beta2) * d * d;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer state matches its config kind"),
        }
        self.step_index += 1;
        Ok(())
    }
}
