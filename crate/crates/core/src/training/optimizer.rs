//! Plain SGD and bias-corrected Adam.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::Param;
use crate::tensor::Tensor;

use super::{Result, TrainingError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 2] = [OptimizerKind::Adam, OptimizerKind::Sgd];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected adam or sgd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainingError::InvalidPlan(format!("optimizer settings {self:?}")))
        }
    }
}

/// Optimizer settings plus per-parameter moments (empty for SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    /// Apply one update. `grads[i]` is the gradient of `params[i]`.
    pub fn step(&mut self, params: &mut [Param<f32>], grads: &[Option<&Tensor<f32>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TrainingError::InvalidPlan(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            match g {
                None => return Err(TrainingError::MissingGradient(p.name.clone())),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(TrainingError::MissingGradient(format!(
                        "{} (gradient shape {:?}, parameter {:?})",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let cfg = self.config;
        let lr = cfg.lr as f32;
        self.step += 1;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let g = g.expect("checked above");
                    for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    self.first_moment = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = self.step as i32;
                let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
                let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
                let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
                let eps = cfg.epsilon as f32;
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let g = g.expect("checked above");
                    let (m, v) = (&mut self.first_moment[k], &mut self.second_moment[k]);
                    for (((w, &d), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = b1 * *m + (1.0 - b1) * d;
                        *v = b2 * *v + (1.0 - b2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
