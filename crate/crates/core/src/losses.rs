//! Training losses with analytic gradients with respect to the pre-softmax logits.
//!
//! Every gradient buffer has the layout of the probability map it came from:
//! pixel-major, `classes` values per pixel.

use serde::{Deserialize, Serialize};

use crate::dataio::{LabelMap, ProbMap, IGNORE, PROB_SUM_TOL};
use crate::error::{Error, Result};
use crate::pla::PseudoLabelMap;
use crate::stm::TransferabilityMap;

/// Floor applied to probabilities inside every `log p`.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor the one-hot pseudo label is clamped to in the reverse cross-entropy term.
pub const LABEL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over pixels.
    #[default]
    Sum,
    /// Sum divided by the number of contributing pixels.
    Mean,
}

impl Reduction {
    fn scale(self, contributing: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean if contributing == 0 => 0.0,
            Reduction::Mean => 1.0 / contributing as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub sce: f64,
    pub consist: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceWeights {
    /// Forward cross-entropy coefficient.
    pub alpha: f64,
    /// Reverse cross-entropy coefficient.
    pub beta: f64,
}

impl Default for SceWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 1.0 }
    }
}

#[inline]
fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn check_aligned(pred: &ProbMap, h: usize, w: usize) -> Result<()> {
    if pred.height() != h || pred.width() != w {
        return Err(Error::shape(format!(
            "probabilities are {}x{}, labels are {h}x{w}",
            pred.height(),
            pred.width()
        )));
    }
    Ok(())
}

/// Weighted cross-entropy over raw rows. Returns `(loss, grad)`.
pub(crate) fn weighted_ce_rows(
    probs: &[f64],
    classes: usize,
    labels: &[i32],
    weights: &[f64],
    reduction: Reduction,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    let mut n = 0usize;
    for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        if l == IGNORE {
            continue;
        }
        let c = l as usize;
        if c >= classes {
            return Err(Error::UnknownClass { label: l, classes });
        }
        n += 1;
        if w == 0.0 {
            continue;
        }
        let p = &probs[i * classes..(i + 1) * classes];
        loss -= w * ln_clamped(p[c]);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, &pj) in g.iter_mut().zip(p) {
            *gj = w * pj;
        }
        g[c] -= w;
    }
    let s = reduction.scale(n);
    if s != 1.0 {
        loss *= s;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    Ok((loss, grad))
}

/// Symmetric cross-entropy over raw rows. Returns `(loss, grad)`.
pub(crate) fn sce_rows(
    probs: &[f64],
    classes: usize,
    labels: &[i32],
    coef: SceWeights,
    reduction: Reduction,
) -> Result<(f64, Vec<f64>)> {
    let reverse = -LABEL_FLOOR.ln();
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    let mut n = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let r = l as usize;
        if r >= classes {
            return Err(Error::UnknownClass { label: l, classes });
        }
        n += 1;
        let p = &probs[i * classes..(i + 1) * classes];
        let pr = p[r];
        loss += coef.alpha * -ln_clamped(pr) + coef.beta * reverse * (1.0 - pr);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (j, (gj, &pj)) in g.iter_mut().zip(p).enumerate() {
            let onehot = if j == r { 1.0 } else { 0.0 };
            *gj = coef.alpha * (pj - onehot) - coef.beta * reverse * pr * (onehot - pj);
        }
    }
    let s = reduction.scale(n);
    if s != 1.0 {
        loss *= s;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    Ok((loss, grad))
}

/// KL(teacher ‖ student) over raw rows. Returns `(loss, grad)`.
pub(crate) fn kld_rows(
    student: &[f64],
    teacher: &[f64],
    classes: usize,
    reduction: Reduction,
) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::shape("student and teacher probabilities differ in size"));
    }
    let mut grad = vec![0.0; student.len()];
    let mut loss = 0.0;
    let n = student.len() / classes.max(1);
    for ((p, q), g) in student
        .chunks_exact(classes)
        .zip(teacher.chunks_exact(classes))
        .zip(grad.chunks_exact_mut(classes))
    {
        let sum: f64 = q.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL || q.iter().any(|&v| v < 0.0) {
            return Err(Error::validation(format!(
                "teacher probabilities sum to {sum}, not 1"
            )));
        }
        for ((gj, &pj), &qj) in g.iter_mut().zip(p).zip(q) {
            if qj > 0.0 {
                loss += qj * (ln_clamped(qj) - ln_clamped(pj));
            }
            *gj = pj - qj;
        }
    }
    let s = reduction.scale(n);
    if s != 1.0 {
        loss *= s;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    Ok((loss, grad))
}

fn term(value: f64, grad: Vec<f64>, set: impl FnOnce(&mut LossValue, f64)) -> LossValue {
    let mut lv = LossValue {
        total: value,
        grad,
        ..LossValue::default()
    };
    set(&mut lv, value);
    lv
}

/// Cross-entropy on source labels, reweighted per pixel by transferability.
pub fn weighted_ce(
    pred: &ProbMap,
    gt: &LabelMap,
    weights: &TransferabilityMap,
    reduction: Reduction,
) -> Result<LossValue> {
    check_aligned(pred, gt.height(), gt.width())?;
    check_aligned(pred, weights.height, weights.width)?;
    if let Some(w) = weights.weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::validation(format!("invalid transferability weight {w}")));
    }
    let (loss, grad) = weighted_ce_rows(
        pred.probs(),
        pred.classes(),
        gt.labels(),
        &weights.weights,
        reduction,
    )?;
    Ok(term(loss, grad, |lv, v| lv.ce = v))
}

/// Symmetric cross-entropy against pseudo labels; unlabeled pixels contribute nothing.
pub fn sce(pred: &ProbMap, pl: &PseudoLabelMap, coef: SceWeights, reduction: Reduction) -> Result<LossValue> {
    let labels = pl.labels();
    check_aligned(pred, labels.height(), labels.width())?;
    let (loss, grad) = sce_rows(pred.probs(), pred.classes(), labels.labels(), coef, reduction)?;
    Ok(term(loss, grad, |lv, v| lv.sce = v))
}

/// KL divergence from the teacher's prediction to the student's. The teacher is
/// a constant: only the student receives a gradient.
pub fn kld_consistency(student: &ProbMap, teacher: &ProbMap, reduction: Reduction) -> Result<LossValue> {
    check_aligned(student, teacher.height(), teacher.width())?;
    if student.classes() != teacher.classes() {
        return Err(Error::shape("student and teacher differ in class count"));
    }
    let (loss, grad) = kld_rows(student.probs(), teacher.probs(), student.classes(), reduction)?;
    Ok(term(loss, grad, |lv, v| lv.consist = v))
}

/// Combined objective `ce + sce + λ·consist`. The terms come from disjoint
/// forward passes, so their gradients are concatenated in that order, the
/// consistency part scaled by λ.
pub fn total_loss(ce: &LossValue, sce: &LossValue, consist: &LossValue, lambda: f64) -> LossValue {
    let mut grad = Vec::with_capacity(ce.grad.len() + sce.grad.len() + consist.grad.len());
    grad.extend_from_slice(&ce.grad);
    grad.extend_from_slice(&sce.grad);
    grad.extend(consist.grad.iter().map(|g| lambda * g));
    LossValue {
        total: ce.total + sce.total + lambda * consist.total,
        ce: ce.total,
        sce: sce.total,
        consist: consist.total,
        grad,
    }
}

/// Exponential moving average of parameters: `teacher ← m·teacher + (1−m)·student`.
pub fn ema_update(teacher: &mut [f64], student: &[f64], m: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::shape(format!(
            "teacher has {} parameters, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::validation(format!("EMA coefficient {m} outside [0, 1]")));
    }
    if m == 0.0 {
        teacher.copy_from_slice(student);
    } else if m < 1.0 {
        for (t, &s) in teacher.iter_mut().zip(student) {
            *t = m * *t + (1.0 - m) * s;
        }
    }
    Ok(())
}
