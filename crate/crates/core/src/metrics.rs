//! Evaluation metrics and training losses.
//!
//! Jaccard of two empty masks is defined as 1.0. All logarithms and
//! denominators are guarded by `EPS` unless the caller passes its own.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgops::{BinaryMask, ImageError, ProbMask};
use crate::prediction::PredictionVector;

pub const EPS: f64 = 1e-7;

/// Challenge cutoff for the threshold Jaccard index.
pub const DEFAULT_TAU: f64 = 0.65;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Shape(#[from] ImageError),
    #[error("tau {0} is outside [0, 1]")]
    BadTau(f64),
    #[error("class {0} has zero count; merge or drop it before weighting")]
    ZeroCount(usize),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("{0} predictions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("class {0} has no samples in the confusion matrix")]
    EmptyClassRow(usize),
    #[error("nothing to evaluate")]
    Empty,
}

/// `|a ∩ b| / |a ∪ b|`, 1.0 when both are empty.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricError> {
    a.same_shape(b)?;
    let (inter, union) = overlap(a, b);
    Ok(ratio(inter, union))
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> (usize, usize) {
    a.data()
        .iter()
        .zip(b.data())
        .fold((0, 0), |(i, u), (&x, &y)| (i + usize::from(x && y), u + usize::from(x || y)))
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard zeroed out below `tau`.
pub fn threshold_jaccard(a: &BinaryMask, b: &BinaryMask, tau: f64) -> Result<f64, MetricError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(MetricError::BadTau(tau));
    }
    let j = jaccard(a, b)?;
    Ok(if j >= tau { j } else { 0.0 })
}

fn check_pair(p: &ProbMask, g: &BinaryMask) -> Result<(), MetricError> {
    p.same_shape(g.width(), g.height())?;
    Ok(())
}

/// `Σ p·g / (Σp + Σg − Σ p·g + eps)`.
pub fn soft_jaccard(p: &ProbMask, g: &BinaryMask, eps: f64) -> Result<f64, MetricError> {
    check_pair(p, g)?;
    let (i, u) = soft_terms(p.data(), g.data(), eps);
    Ok(i / u)
}

fn soft_terms(p: &[f64], g: &[bool], eps: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&pv, &gv) in p.iter().zip(g) {
        let gv = if gv { 1.0 } else { 0.0 };
        inter += pv * gv;
        sp += pv;
        sg += gv;
    }
    (inter, sp + sg - inter + eps)
}

/// Mean binary cross-entropy minus `jaccard_weight · ln(softJ + eps)`.
///
/// Probabilities are clamped to `[eps, 1 − eps]` for both terms.
pub fn bce_soft_jaccard_loss(
    p: &ProbMask,
    g: &BinaryMask,
    jaccard_weight: f64,
    eps: f64,
) -> Result<f64, MetricError> {
    check_pair(p, g)?;
    let clamped: Vec<f64> = p.data().iter().map(|v| v.clamp(eps, 1.0 - eps)).collect();
    let n = clamped.len() as f64;
    let bce = clamped
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| if gv { -pv.ln() } else { -(1.0 - pv).ln() })
        .sum::<f64>()
        / n;
    if jaccard_weight == 0.0 {
        return Ok(bce);
    }
    let (i, u) = soft_terms(&clamped, g.data(), eps);
    Ok(bce - jaccard_weight * (i / u + eps).ln())
}

/// Analytic gradient of [`bce_soft_jaccard_loss`] with respect to each
/// probability. Pixels sitting on a clamp bound get a zero gradient.
pub fn bce_soft_jaccard_grad(
    p: &ProbMask,
    g: &BinaryMask,
    jaccard_weight: f64,
    eps: f64,
) -> Result<Vec<f64>, MetricError> {
    check_pair(p, g)?;
    let clamped: Vec<f64> = p.data().iter().map(|v| v.clamp(eps, 1.0 - eps)).collect();
    let n = clamped.len() as f64;
    let (i, u) = soft_terms(&clamped, g.data(), eps);
    let j = i / u;
    Ok(clamped
        .iter()
        .zip(p.data())
        .zip(g.data())
        .map(|((&pv, &raw), &gv)| {
            if pv != raw {
                return 0.0;
            }
            let gf = if gv { 1.0 } else { 0.0 };
            let d_bce = if gv { -1.0 / pv } else { 1.0 / (1.0 - pv) } / n;
            let d_j = (gf * u - i * (1.0 - gf)) / (u * u);
            d_bce - jaccard_weight * d_j / (j + eps)
        })
        .collect())
}

/// Per-class loss weights: the most common class gets 1.0, every other
/// class `max_count / count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }
}

pub fn class_weights(counts: &[usize]) -> Result<ClassWeights, MetricError> {
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(MetricError::ZeroCount(k));
    }
    let max = *counts.iter().max().ok_or(MetricError::Empty)? as f64;
    Ok(ClassWeights(counts.iter().map(|&c| max / c as f64).collect()))
}

/// `(1/N) Σ w[y] · (−ln p[y])`, with `p[y]` clamped to `[EPS, 1]`.
pub fn weighted_cross_entropy(
    probs: &[PredictionVector],
    labels: &[usize],
    w: &ClassWeights,
) -> Result<f64, MetricError> {
    if probs.len() != labels.len() {
        return Err(MetricError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() || y >= w.0.len() {
            return Err(MetricError::LabelOutOfRange {
                label: y,
                n_classes: p.len().min(w.0.len()),
            });
        }
        total += w.0[y] * -p.0[y].clamp(EPS, 1.0).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_pairs(n: usize, truth: &[usize], predicted: &[usize]) -> Result<Self, MetricError> {
        if truth.len() != predicted.len() {
            return Err(MetricError::LengthMismatch(predicted.len(), truth.len()));
        }
        let mut cm = Self::new(n);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<(), MetricError> {
        for label in [truth, predicted] {
            if label >= self.n {
                return Err(MetricError::LabelOutOfRange {
                    label,
                    n_classes: self.n,
                });
            }
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    /// Elementwise sum; matrices of different size are a programming error.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.n, other.n, "confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.n..(truth + 1) * self.n].iter().sum()
    }
}

/// Mean per-class recall (normalized multi-class accuracy).
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    if cm.n == 0 {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for k in 0..cm.n {
        let support = cm.row_sum(k);
        if support == 0 {
            return Err(MetricError::EmptyClassRow(k));
        }
        sum += cm.get(k, k) as f64 / support as f64;
    }
    Ok(sum / cm.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributePooling {
    /// One Jaccard per class over pixels pooled across all images.
    #[default]
    Pooled,
    /// Per-image Jaccard, averaged over images, then over classes.
    PerImage,
}

/// Mean over attribute classes of the Jaccard index between predicted and
/// ground-truth masks. `pred[i][c]` is image `i`, class `c`.
pub fn attribute_score<const C: usize>(
    pred: &[[BinaryMask; C]],
    gt: &[[BinaryMask; C]],
    pooling: AttributePooling,
) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() || C == 0 {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for c in 0..C {
        match pooling {
            AttributePooling::Pooled => {
                let (mut inter, mut union) = (0, 0);
                for (p, g) in pred.iter().zip(gt) {
                    p[c].same_shape(&g[c])?;
                    let (i, u) = overlap(&p[c], &g[c]);
                    inter += i;
                    union += u;
                }
                total += ratio(inter, union);
            }
            AttributePooling::PerImage => {
                let mut s = 0.0;
                for (p, g) in pred.iter().zip(gt) {
                    s += jaccard(&p[c], &g[c])?;
                }
                total += s / pred.len() as f64;
            }
        }
    }
    Ok(total / C as f64)
}
