//! Overlap and cross-entropy losses with closed-form gradients.
//!
//! Every per-image function takes flat prediction/target slices of equal
//! length. Predictions are probabilities, targets are `{0, 1}`. Sums are
//! accumulated in `f64` regardless of the element type.
//!
//! When both prediction and target are all zero the overlap terms are
//! defined as perfect: the Dice coefficient is 1 and the loss and gradient
//! are 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction has {pred} values, target has {target}")]
    ShapeMismatch { pred: usize, target: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown loss kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1 − D)²` on the Dice coefficient.
    L2dice,
    /// `1 − Σyx / (Σy² + Σx² − Σyx)`.
    Dice,
    Bce,
    /// `Dice + BCE`.
    Joint,
    FocalJoint,
    /// `Dice + BCE + (1 − D)²`.
    JointL2,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::L2dice,
        LossKind::Dice,
        LossKind::Bce,
        LossKind::Joint,
        LossKind::FocalJoint,
        LossKind::JointL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L2dice => "l2dice",
            LossKind::Dice => "dice",
            LossKind::Bce => "bce",
            LossKind::Joint => "joint",
            LossKind::FocalJoint => "focal_joint",
            LossKind::JointL2 => "joint_l2",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LossError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub probability_clamp: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.22,
            gamma: 1.9,
            probability_clamp: 1e-7,
            kind: LossKind::Joint,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

fn check<T: Real>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(LossError::ShapeMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(())
}

struct Sums {
    pp: f64,
    yy: f64,
    py: f64,
}

fn sums<T: Real>(pred: &[T], target: &[T]) -> Sums {
    let mut s = Sums {
        pp: 0.0,
        yy: 0.0,
        py: 0.0,
    };
    for (&p, &y) in pred.iter().zip(target) {
        let (p, y) = (p.as_f64(), y.as_f64());
        s.pp += p * p;
        s.yy += y * y;
        s.py += p * y;
    }
    s
}

/// `D = 2Σpy / (Σp² + Σy²)`.
pub fn dice_coefficient_img<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    check(pred, target)?;
    let s = sums(pred, target);
    let den = s.pp + s.yy;
    Ok(if den == 0.0 { 1.0 } else { 2.0 * s.py / den })
}

/// `∂D/∂p_i = 2[y_i S − 2 p_i Σpy] / S²` with `S = Σp² + Σy²`.
pub fn dice_coefficient_grad<T: Real>(pred: &[T], target: &[T]) -> Result<Vec<f64>> {
    check(pred, target)?;
    let s = sums(pred, target);
    let den = s.pp + s.yy;
    if den == 0.0 {
        return Ok(vec![0.0; pred.len()]);
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| 2.0 * (y.as_f64() * den - 2.0 * p.as_f64() * s.py) / (den * den))
        .collect())
}

/// `Σ_img (1 − D_img)²`.
pub fn l2_dice_loss<T: Real>(preds: &[&[T]], targets: &[&[T]]) -> Result<f64> {
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if preds.len() != targets.len() {
        return Err(LossError::ShapeMismatch {
            pred: preds.len(),
            target: targets.len(),
        });
    }
    preds.iter().zip(targets).try_fold(0.0, |acc, (p, t)| {
        let d = dice_coefficient_img(p, t)?;
        Ok(acc + (1.0 - d) * (1.0 - d))
    })
}

/// Gradient of `(1 − D)²` for one image: `−2(1 − D) ∂D/∂p`.
pub fn l2_dice_grad<T: Real>(pred: &[T], target: &[T]) -> Result<Vec<f64>> {
    let d = dice_coefficient_img(pred, target)?;
    let mut g = dice_coefficient_grad(pred, target)?;
    g.iter_mut().for_each(|v| *v *= -2.0 * (1.0 - d));
    Ok(g)
}

/// The derivative of `D` as printed in the source formula, half the true value.
pub fn dice_coefficient_grad_printed<T: Real>(pred: &[T], target: &[T]) -> Result<Vec<f64>> {
    let mut g = dice_coefficient_grad(pred, target)?;
    g.iter_mut().for_each(|v| *v *= 0.5);
    Ok(g)
}

fn soft_jaccard_value_grad<T: Real>(pred: &[T], target: &[T]) -> (f64, Vec<f64>) {
    let s = sums(pred, target);
    let union = s.yy + s.pp - s.py;
    if union == 0.0 {
        return (0.0, vec![0.0; pred.len()]);
    }
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            -(y * union - s.py * (2.0 * p - y)) / (union * union)
        })
        .collect();
    (1.0 - s.py / union, grad)
}

/// `1 − Σyx / (Σy² + Σx² − Σyx)`.
pub fn dice_loss<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    check(pred, target)?;
    Ok(soft_jaccard_value_grad(pred, target).0)
}

fn clamp_p(p: f64, clamp: f64) -> (f64, bool) {
    if p < clamp {
        (clamp, true)
    } else if p > 1.0 - clamp {
        (1.0 - clamp, true)
    } else {
        (p, false)
    }
}

fn bce_value_grad<T: Real>(pred: &[T], target: &[T], clamp: f64) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let y = y.as_f64();
            let (x, clamped) = clamp_p(p.as_f64(), clamp);
            total -= y * x.ln() + (1.0 - y) * (1.0 - x).ln();
            if clamped {
                0.0
            } else {
                -y / x + (1.0 - y) / (1.0 - x)
            }
        })
        .collect();
    (total, grad)
}

/// `−Σ[y ln x + (1−y) ln(1−x)]` with `x` clamped into `[clamp, 1 − clamp]`.
pub fn bce_loss<T: Real>(pred: &[T], target: &[T], clamp: f64) -> Result<f64> {
    check(pred, target)?;
    Ok(bce_value_grad(pred, target, clamp).0)
}

/// Focal joint loss with separate weights for the overlap term and the
/// positive class of the cross-entropy term:
///
/// `α_d·[1 − Σ yx(1−x)^γ / (Σy² + Σx² − Σyx)] + Σ[−α_f y ln x − (1−α_f) x^γ (1−y) ln(1−x)]`
pub fn focal_joint_value_grad<T: Real>(
    pred: &[T],
    target: &[T],
    alpha_dice: f64,
    alpha_focal: f64,
    gamma: f64,
    clamp: f64,
) -> Result<(f64, Vec<f64>)> {
    check(pred, target)?;
    let s = sums(pred, target);
    let union = s.yy + s.pp - s.py;
    let mut num = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let (p, y) = (p.as_f64(), y.as_f64());
        num += y * p * (1.0 - p).powf(gamma);
    }
    let mut value = if union == 0.0 {
        0.0
    } else {
        alpha_dice * (1.0 - num / union)
    };
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let (p, y) = (p.as_f64(), y.as_f64());
        let mut g = 0.0;
        if union != 0.0 {
            let q = 1.0 - p;
            let dq = if q == 0.0 { 0.0 } else { gamma * p * q.powf(gamma - 1.0) };
            let dnum = y * (q.powf(gamma) - dq);
            let dunion = 2.0 * p - y;
            g -= alpha_dice * (dnum * union - num * dunion) / (union * union);
        }
        let (x, clamped) = clamp_p(p, clamp);
        let (lx, l1x) = (x.ln(), (1.0 - x).ln());
        let xg = x.powf(gamma);
        value += -alpha_focal * y * lx - (1.0 - alpha_focal) * xg * (1.0 - y) * l1x;
        if !clamped {
            let dxg = if x == 0.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) };
            g += -alpha_focal * y / x - (1.0 - alpha_focal) * (1.0 - y) * (dxg * l1x - xg / (1.0 - x));
        }
        grad.push(g);
    }
    Ok((value, grad))
}

/// Loss value of one image and its gradient with respect to `pred`.
pub fn image_loss<T: Real>(config: &LossConfig, pred: &[T], target: &[T]) -> Result<(f64, Vec<f64>)> {
    check(pred, target)?;
    let clamp = config.probability_clamp;
    let l2 = || -> Result<(f64, Vec<f64>)> {
        let d = dice_coefficient_img(pred, target)?;
        Ok(((1.0 - d) * (1.0 - d), l2_dice_grad(pred, target)?))
    };
    let joint = || {
        let (dv, mut dg) = soft_jaccard_value_grad(pred, target);
        let (bv, bg) = bce_value_grad(pred, target, clamp);
        dg.iter_mut().zip(&bg).for_each(|(a, b)| *a += b);
        (dv + bv, dg)
    };
    match config.kind {
        LossKind::L2dice => l2(),
        LossKind::Dice => Ok(soft_jaccard_value_grad(pred, target)),
        LossKind::Bce => Ok(bce_value_grad(pred, target, clamp)),
        LossKind::Joint => Ok(joint()),
        LossKind::FocalJoint => focal_joint_value_grad(pred, target, config.alpha, config.alpha, config.gamma, clamp),
        LossKind::JointL2 => {
            let (jv, mut jg) = joint();
            let (lv, lg) = l2()?;
            jg.iter_mut().zip(&lg).for_each(|(a, b)| *a += b);
            Ok((jv + lv, jg))
        }
    }
}

pub fn joint_loss<T: Real>(config: &LossConfig, pred: &[T], target: &[T]) -> Result<f64> {
    Ok(image_loss(config, pred, target)?.0)
}

/// Per-image losses summed over pixels, then averaged over the batch.
/// The leading axis of both tensors is the batch.
pub fn batch_loss<T: Real>(config: &LossConfig, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check(pred.data(), target.data())?;
    let n = pred.shape()[0];
    if target.shape()[0] != n {
        return Err(LossError::ShapeMismatch {
            pred: n,
            target: target.shape()[0],
        });
    }
    let per = pred.numel() / n;
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.numel());
    for (p, t) in pred.data().chunks(per).zip(target.data().chunks(per)) {
        let (v, g) = image_loss(config, p, t)?;
        total += v;
        grad.extend(g.into_iter().map(|g| T::of(g * scale)));
    }
    Ok((total * scale, Tensor::new(pred.shape().to_vec(), grad)?))
}
