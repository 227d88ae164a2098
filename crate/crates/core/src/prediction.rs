use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PredictionError {
    #[error("no predictions to combine")]
    Empty,
    #[error("prediction {index} has {got} classes, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
}

/// Per-class probabilities for one image (or one patch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionVector(pub Vec<f64>);

impl PredictionVector {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|&p| p >= -tol) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// Numerically stable softmax of raw scores.
    pub fn softmax(scores: &[f64]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / z).collect())
    }
}

/// Per-class arithmetic mean, accumulated in input order.
pub fn mean_predictions(preds: &[PredictionVector]) -> Result<PredictionVector, PredictionError> {
    let first = preds.first().ok_or(PredictionError::Empty)?;
    let n = first.len();
    let mut acc = vec![0.0; n];
    for (index, p) in preds.iter().enumerate() {
        if p.len() != n {
            return Err(PredictionError::LengthMismatch {
                index,
                expected: n,
                got: p.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(&p.0) {
            *a += v;
        }
    }
    let m = preds.len() as f64;
    Ok(PredictionVector(acc.into_iter().map(|a| a / m).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(PredictionVector(vec![0.4, 0.4, 0.2]).argmax(), 0);
        assert_eq!(PredictionVector(vec![0.1, 0.45, 0.45]).argmax(), 1);
    }

    #[test]
    fn softmax_is_simplex() {
        let p = PredictionVector::softmax(&[1000.0, -5.0, 3.0]);
        assert!(p.is_simplex(1e-12));
        assert_eq!(p.argmax(), 0);
    }

    #[test]
    fn mean_rejects_mismatch() {
        let err = mean_predictions(&[PredictionVector(vec![1.0, 0.0]), PredictionVector(vec![1.0])]);
        assert_eq!(
            err,
            Err(PredictionError::LengthMismatch {
                index: 1,
                expected: 2,
                got: 1
            })
        );
        assert_eq!(mean_predictions(&[]), Err(PredictionError::Empty));
    }
}
