//! Training objectives and their gradients with respect to student logits.
//!
//! Sigmoid losses are evaluated in fused logit form,
//! `-y log σ(o) - (1-y) log(1-σ(o)) = softplus(o) - y·o`, which never takes
//! the log of a saturated probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// General-teacher distillation weight.
    pub lambda: f64,
    /// Superclass-teacher distillation weight.
    pub mu: f64,
    /// Temperature of the softmax distillation baseline.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mu: 0.5,
            temperature: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidConfig("mu must be finite and >= 0".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Softmax cross-entropy against a single target class.
pub fn softmax_ce(logits: &[f64], target: usize) -> LossGrad {
    assert!(target < logits.len(), "target out of range");
    let logp = log_softmax(logits);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(i, lp)| lp.exp() - if i == target { 1.0 } else { 0.0 })
        .collect();
    LossGrad {
        loss: -logp[target],
        grad,
    }
}

/// Temperature-scaled softmax distillation:
/// `-Σ π̂_i log π_i` with `π = softmax(o/T)`, `π̂ = softmax(ô/T)`.
pub fn softmax_kd(student: &[f64], teacher: &[f64], temperature: f64) -> Result<LossGrad> {
    if student.len() != teacher.len() {
        return Err(Error::SliceMisalignment {
            student: student.len(),
            teacher: teacher.len(),
        });
    }
    if student.is_empty() {
        return Ok(LossGrad { loss: 0.0, grad: Vec::new() });
    }
    let s: Vec<f64> = student.iter().map(|v| v / temperature).collect();
    let t: Vec<f64> = teacher.iter().map(|v| v / temperature).collect();
    let logp = log_softmax(&s);
    let target: Vec<f64> = log_softmax(&t).into_iter().map(f64::exp).collect();
    let loss = -target.iter().zip(&logp).map(|(q, lp)| q * lp).sum::<f64>();
    let grad = logp
        .iter()
        .zip(&target)
        .map(|(lp, q)| (lp.exp() - q) / temperature)
        .collect();
    Ok(LossGrad { loss, grad })
}

/// Binary cross-entropy summed over classes; `targets` may be soft.
pub fn bce(logits: &[f64], targets: &[f64]) -> LossGrad {
    assert_eq!(logits.len(), targets.len(), "one target per logit");
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&o, &y)| {
            loss += softplus(o) - y * o;
            sigmoid(o) - y
        })
        .collect();
    LossGrad { loss, grad }
}

/// Sigmoid distillation: BCE of the student's logits against the teacher's
/// scores on an aligned class slice.
pub fn sigmoid_kd(student_logits: &[f64], teacher_scores: &[f64]) -> Result<LossGrad> {
    if student_logits.len() != teacher_scores.len() {
        return Err(Error::SliceMisalignment {
            student: student_logits.len(),
            teacher: teacher_scores.len(),
        });
    }
    Ok(bce(student_logits, teacher_scores))
}

/// Class ranges of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MtkdLayout {
    /// Classes of the initial step, `[0, n_0)`, distilled from the superclass teacher.
    pub initial: usize,
    /// Classes known to the general teacher, `[0, n)`; `[n_0, n)` is distilled from it.
    pub previous: usize,
}

/// `L_bce + λ·L_gd + μ·L_sd` for one sample.
///
/// `general_scores` must cover `[0, n)` and `superclass_scores` `[0, n_0)`;
/// only `general_scores[n_0..n]` enters the general-teacher term. Classes
/// `[n, c)` receive the BCE gradient alone.
pub fn mtkd_loss(
    logits: &[f64],
    targets: &[f64],
    general_scores: &[f64],
    superclass_scores: &[f64],
    layout: MtkdLayout,
    weights: &LossWeights,
) -> Result<LossGrad> {
    let MtkdLayout { initial, previous } = layout;
    if !(0 < initial && initial <= previous && previous <= logits.len()) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < n_0 ({initial}) <= n ({previous}) <= outputs ({})",
            logits.len()
        )));
    }
    if general_scores.len() != previous {
        return Err(Error::SliceMisalignment {
            student: previous,
            teacher: general_scores.len(),
        });
    }
    if superclass_scores.len() != initial {
        return Err(Error::SliceMisalignment {
            student: initial,
            teacher: superclass_scores.len(),
        });
    }
    let mut total = bce(logits, targets);
    let gd = sigmoid_kd(&logits[initial..previous], &general_scores[initial..previous])?;
    let sd = sigmoid_kd(&logits[..initial], superclass_scores)?;
    total.loss = total.loss + weights.lambda * gd.loss + weights.mu * sd.loss;
    for (g, d) in total.grad[initial..previous].iter_mut().zip(&gd.grad) {
        *g += weights.lambda * d;
    }
    for (g, d) in total.grad[..initial].iter_mut().zip(&sd.grad) {
        *g += weights.mu * d;
    }
    Ok(total)
}

/// `L_bce + λ·L_kd` with the previous model distilling every old class
/// `[0, n)`.
pub fn baseline_kd_loss(
    logits: &[f64],
    targets: &[f64],
    teacher_scores: &[f64],
    lambda: f64,
) -> Result<LossGrad> {
    let n = teacher_scores.len();
    if n > logits.len() {
        return Err(Error::SliceMisalignment {
            student: logits.len(),
            teacher: n,
        });
    }
    let mut total = bce(logits, targets);
    let kd = sigmoid_kd(&logits[..n], teacher_scores)?;
    total.loss += lambda * kd.loss;
    for (g, d) in total.grad[..n].iter_mut().zip(&kd.grad) {
        *g += lambda * d;
    }
    Ok(total)
}

/// One-hot target vector of length `classes`.
pub fn one_hot(classes: usize, label: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}
