//! Loss functions with analytic gradients.
//!
//! Probability-space losses clamp their inputs to `[EPS, 1 - EPS]`. The
//! `*_with_logits` variants are the same losses composed with a sigmoid or
//! softmax, computed in logit space so that saturated predictions keep a
//! useful gradient; training code uses those.

use crate::error::{NnError, Result};

pub const EPS: f64 = 1e-7;

/// A scalar loss value and its gradient w.r.t. each input element.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(NnError::Usage(format!("{what}: length mismatch {a} vs {b}")));
    }
    if a == 0 {
        return Err(NnError::Usage(format!("{what}: empty input")));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(mse_grad(pred, target)?.value)
}

pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<LossGrad> {
    same_len(pred.len(), target.len(), "mse")?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Focal loss for one prediction: `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal(prob: f64, label: bool, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(prob);
    let (pt, at) = if label { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Derivative of [`focal`] w.r.t. `prob` (zero outside the clamp range).
pub fn focal_dprob(prob: f64, label: bool, gamma: f64, alpha: f64) -> f64 {
    if prob <= EPS || prob >= 1.0 - EPS {
        return 0.0;
    }
    let (pt, at, sign) = if label { (prob, alpha, 1.0) } else { (1.0 - prob, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    // d/dpt of -at q^γ ln pt
    let dpt = -at * (-gamma * q.powf(gamma - 1.0) * pt.ln() + q.powf(gamma) / pt);
    sign * dpt
}

/// Mean focal loss over a batch.
pub fn focal_mean(probs: &[f64], labels: &[bool], gamma: f64, alpha: f64) -> Result<LossGrad> {
    same_len(probs.len(), labels.len(), "focal")?;
    let n = probs.len() as f64;
    let value = probs.iter().zip(labels).map(|(&p, &l)| focal(p, l, gamma, alpha)).sum::<f64>() / n;
    let grad = probs.iter().zip(labels).map(|(&p, &l)| focal_dprob(p, l, gamma, alpha) / n).collect();
    Ok(LossGrad { value, grad })
}

/// Focal loss on a logit, returning `(loss, dloss/dlogit)`.
pub fn focal_with_logits(z: f64, label: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    // ln p_t = -softplus(-s z) with s = ±1.
    let s = if label { 1.0 } else { -1.0 };
    let at = if label { alpha } else { 1.0 - alpha };
    let pt = sigmoid(s * z);
    let log_pt = -softplus(-s * z);
    let q = 1.0 - pt;
    let value = -at * q.powf(gamma) * log_pt;
    // dpt/dz = s pt q
    let dpt = if gamma == 0.0 {
        -at / pt
    } else {
        -at * (-gamma * q.powf(gamma - 1.0) * log_pt + q.powf(gamma) / pt)
    };
    (value, dpt * s * pt * q)
}

/// Elementwise smooth-L1 (Huber with transition `beta`), averaged.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<LossGrad> {
    same_len(pred.len(), target.len(), "smooth_l1")?;
    if beta <= 0.0 {
        return Err(NnError::Usage(format!("smooth_l1 beta must be > 0, got {beta}")));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < beta {
                value += 0.5 * d * d / beta;
                d / beta / n
            } else {
                value += d.abs() - 0.5 * beta;
                d.signum() / n
            }
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Mean binary cross-entropy; labels may be soft targets in `[0, 1]`.
pub fn bce(probs: &[f64], labels: &[f64]) -> Result<LossGrad> {
    same_len(probs.len(), labels.len(), "bce")?;
    let n = probs.len() as f64;
    let mut value = 0.0;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(&p0, &y)| {
            let p = clamp_prob(p0);
            value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            if p0 <= EPS || p0 >= 1.0 - EPS {
                0.0
            } else {
                (-(y / p) + (1.0 - y) / (1.0 - p)) / n
            }
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// BCE on one logit: `(loss, dloss/dlogit)`.
pub fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let value = y * softplus(-z) + (1.0 - y) * softplus(z);
    (value, sigmoid(z) - y)
}

pub const DICE_SMOOTH: f64 = 1.0;

/// `1 - (2Σpg + s) / (Σp + Σg + s)` with `s = 1`.
pub fn dice_loss(prob: &[f64], gt: &[f64]) -> Result<LossGrad> {
    if prob.len() != gt.len() {
        return Err(NnError::Shape(format!("dice: {} vs {} elements", prob.len(), gt.len())));
    }
    let inter: f64 = prob.iter().zip(gt).map(|(p, g)| p * g).sum();
    let union = prob.iter().sum::<f64>() + gt.iter().sum::<f64>() + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let value = 1.0 - num / union;
    let grad = gt.iter().map(|g| -(2.0 * g * union - num) / (union * union)).collect();
    Ok(LossGrad { value, grad })
}

/// `-ln probs[label]` on a probability vector.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<LossGrad> {
    if label >= probs.len() {
        return Err(NnError::Usage(format!("label {label} out of range for {} classes", probs.len())));
    }
    let p = probs[label].max(EPS);
    let mut grad = vec![0.0; probs.len()];
    if probs[label] > EPS {
        grad[label] = -1.0 / p;
    }
    Ok(LossGrad { value: -p.ln(), grad })
}

/// Softmax cross-entropy on logits; gradient is `softmax - onehot`.
pub fn cross_entropy_with_logits(logits: &[f64], label: usize) -> Result<LossGrad> {
    if label >= logits.len() {
        return Err(NnError::Usage(format!("label {label} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok(LossGrad { value: lse - logits[label], grad })
}
