//! SGD with momentum and AdamW, keyed by parameter name, plus per-stage learning-rate
//! schedules.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
    /// SGD only.
    pub nesterov: bool,
    /// AdamW only.
    pub beta1: f64,
    /// AdamW only.
    pub beta2: f64,
    /// AdamW only.
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, lr, ..Default::default() }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adamw, lr, weight_decay, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidSchedule(format!("optimizer {what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Constant,
    Cosine,
}

/// Learning-rate shape within one stage; it restarts at every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub decay: LrDecay,
    /// Linear warmup length in epochs, clipped to the stage length.
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of the base rate (cosine only).
    pub min_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { decay: LrDecay::Cosine, warmup_epochs: 0, min_factor: 0.0 }
    }
}

impl LrSchedule {
    /// Multiplier on the base rate at `step` of a stage lasting `total` steps with
    /// `steps_per_epoch` steps per epoch.
    pub fn factor(&self, step: usize, total: usize, steps_per_epoch: usize) -> f64 {
        let warmup = (self.warmup_epochs * steps_per_epoch).min(total);
        if step < warmup {
            return (step + 1) as f64 / warmup as f64;
        }
        match self.decay {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => {
                let span = (total - warmup).max(1) as f64;
                let t = (step - warmup) as f64 / span;
                self.min_factor + (1.0 - self.min_factor) * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}

struct Slot<T> {
    first: Tensor<T>,
    second: Option<Tensor<T>>,
}

pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    state: HashMap<String, Slot<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, state: HashMap::new(), steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm<M: Module<T> + ?Sized>(model: &M) -> f64 {
        let mut acc = 0.0f64;
        model.visit("", &mut |_, p| {
            if p.trainable() {
                acc += p.grad.data().iter().map(|g| g.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>();
            }
        });
        acc.sqrt()
    }

    /// Applies one update with learning rate `lr` using the accumulated gradients.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.steps += 1;
        let cfg = self.config.clone();
        let scale = match cfg.grad_clip {
            Some(c) => {
                let norm = Self::grad_norm(model);
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.steps as i32;
        let state = &mut self.state;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable() {
                return;
            }
            let decay = p.kind == ParamKind::Weight && cfg.weight_decay > 0.0;
            let slot = state.entry(name.to_string()).or_insert_with(|| Slot {
                first: Tensor::zeros(p.value.shape()),
                second: (cfg.kind == OptimizerKind::Adamw).then(|| Tensor::zeros(p.value.shape())),
            });
            let (lr_t, wd, sc) = (T::lit(lr), T::lit(cfg.weight_decay), T::lit(scale));
            match cfg.kind {
                OptimizerKind::Sgd => {
                    let mu = T::lit(cfg.momentum);
                    let it = p.value.data_mut().iter_mut().zip(p.grad.data()).zip(slot.first.data_mut());
                    for ((w, &g), v) in it {
                        let mut g = g * sc;
                        if decay {
                            g += wd * *w;
                        }
                        *v = mu * *v + g;
                        let d = if cfg.nesterov { g + mu * *v } else { *v };
                        *w -= lr_t * d;
                    }
                }
                OptimizerKind::Adamw => {
                    let (b1, b2) = (cfg.beta1, cfg.beta2);
                    let c1 = T::lit(1.0 - b1.powi(t));
                    let c2 = T::lit(1.0 - b2.powi(t));
                    let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(cfg.eps));
                    let one = T::one();
                    let second = slot.second.as_mut().expect("adam state");
                    let it = p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(slot.first.data_mut())
                        .zip(second.data_mut());
                    for (((w, &g), m), v) in it {
                        let g = g * sc;
                        if decay {
                            *w -= lr_t * wd * *w;
                        }
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        });
    }
}
