//! Combining model outputs: plain averaging, holdout-based model selection,
//! and a small gradient-boosted-tree stacker over per-model probabilities.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgops::{ImageError, ProbMask};
use crate::prediction::{mean_predictions, PredictionError, PredictionVector};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Shape(#[from] ImageError),
    #[error("nothing to ensemble")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("model output header must be image_id,model_id,p_0,...; got {0:?}")]
    BadHeader(Vec<String>),
    #[error("row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("image {image_id} is missing output from model {model_id}")]
    MissingOutput { image_id: String, model_id: String },
    #[error("duplicate output for image {image_id}, model {model_id}")]
    DuplicateOutput { image_id: String, model_id: String },
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("training set needs at least two classes present")]
    SingleClass,
    #[error("label {label} out of range for {n_classes} classes")]
    BadLabel { label: usize, n_classes: usize },
    #[error("row has {got} features, stacker expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("feature rows and labels differ in length ({rows} vs {labels})")]
    LabelCount { rows: usize, labels: usize },
    #[error("invalid stacker parameter: {0}")]
    BadParam(String),
    #[error("stacker json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported stacker format version {0}")]
    Version(u32),
}

/// Per-class arithmetic mean over models.
pub fn mean_ensemble_probs(rows: &[PredictionVector]) -> Result<PredictionVector, EnsembleError> {
    Ok(mean_predictions(rows)?)
}

/// Pixelwise mean of equally shaped probability masks.
pub fn mean_ensemble_masks(masks: &[ProbMask]) -> Result<ProbMask, EnsembleError> {
    let first = masks.first().ok_or(EnsembleError::Empty)?;
    let (w, h) = (first.width(), first.height());
    let mut acc = vec![0.0; w * h];
    for m in masks {
        m.same_shape(w, h)?;
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let n = masks.len() as f64;
    for a in &mut acc {
        *a = (*a / n).clamp(0.0, 1.0);
    }
    Ok(ProbMask::new(w, h, acc)?)
}

/// The ids of the `k` best-scoring models (higher is better). Equal scores
/// are ordered by model id so the choice never depends on input order.
pub fn select_top_models(holdout_scores: &[(String, f64)], k: usize) -> Vec<String> {
    let mut ranked: Vec<&(String, f64)> = holdout_scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(id, _)| id.clone()).collect()
}

/// One image's stacked model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputRow {
    pub image_id: String,
    /// `M·C` values: model 0's class block, then model 1's, ...
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputMatrix {
    model_ids: Vec<String>,
    n_classes: usize,
    rows: Vec<OutputRow>,
}

const SIMPLEX_TOL: f64 = 1e-6;

impl ModelOutputMatrix {
    /// `preds[m][i]` is model `m`'s output for image `i`.
    pub fn from_predictions(
        model_ids: Vec<String>,
        image_ids: Vec<String>,
        preds: &[Vec<PredictionVector>],
    ) -> Result<Self, EnsembleError> {
        let n_classes = preds
            .first()
            .and_then(|p| p.first())
            .map(PredictionVector::len)
            .ok_or(EnsembleError::Empty)?;
        if preds.len() != model_ids.len() {
            return Err(EnsembleError::BadParam("one prediction list per model".into()));
        }
        let mut rows = Vec::with_capacity(image_ids.len());
        for (i, image_id) in image_ids.into_iter().enumerate() {
            let mut features = Vec::with_capacity(model_ids.len() * n_classes);
            for (m, model) in preds.iter().enumerate() {
                let p = model.get(i).ok_or_else(|| EnsembleError::MissingOutput {
                    image_id: image_id.clone(),
                    model_id: model_ids[m].clone(),
                })?;
                if p.len() != n_classes {
                    return Err(PredictionError::LengthMismatch {
                        index: m,
                        expected: n_classes,
                        got: p.len(),
                    }
                    .into());
                }
                features.extend_from_slice(p.as_slice());
            }
            rows.push(OutputRow {
                image_id,
                features,
                label: None,
            });
        }
        Ok(Self {
            model_ids,
            n_classes,
            rows,
        })
    }

    /// Reads the long format `image_id,model_id,p_0,...,p_{C-1}`. Models are
    /// ordered by first appearance, images likewise; every image must have
    /// exactly one row per model.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, EnsembleError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let n_classes = header.len().saturating_sub(2);
        let header_ok = n_classes >= 1
            && header[0] == "image_id"
            && header[1] == "model_id"
            && (0..n_classes).all(|k| header[k + 2] == format!("p_{k}"));
        if !header_ok {
            return Err(EnsembleError::BadHeader(header));
        }

        let mut model_ids: Vec<String> = Vec::new();
        let mut model_index: HashMap<String, usize> = HashMap::new();
        let mut image_ids: Vec<String> = Vec::new();
        let mut image_index: HashMap<String, usize> = HashMap::new();
        let mut cells: Vec<HashMap<usize, Vec<f64>>> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = row + 2;
            let image_id = rec[0].to_string();
            let model_id = rec[1].to_string();
            let probs = (2..rec.len())
                .map(|j| {
                    rec[j].parse::<f64>().map_err(|e| EnsembleError::BadRow {
                        row,
                        msg: format!("{}: {e}", header[j]),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let sum: f64 = probs.iter().sum();
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(EnsembleError::BadRow {
                    row,
                    msg: format!("probabilities are not on the simplex (sum {sum})"),
                });
            }
            let m = *model_index.entry(model_id.clone()).or_insert_with(|| {
                model_ids.push(model_id.clone());
                model_ids.len() - 1
            });
            let i = *image_index.entry(image_id.clone()).or_insert_with(|| {
                image_ids.push(image_id.clone());
                cells.push(HashMap::new());
                image_ids.len() - 1
            });
            if cells[i].insert(m, probs).is_some() {
                return Err(EnsembleError::DuplicateOutput { image_id, model_id });
            }
        }
        if image_ids.is_empty() {
            return Err(EnsembleError::Empty);
        }
        let mut rows = Vec::with_capacity(image_ids.len());
        for (image_id, mut per_model) in image_ids.into_iter().zip(cells) {
            let mut features = Vec::with_capacity(model_ids.len() * n_classes);
            for (m, model_id) in model_ids.iter().enumerate() {
                let block = per_model.remove(&m).ok_or_else(|| EnsembleError::MissingOutput {
                    image_id: image_id.clone(),
                    model_id: model_id.clone(),
                })?;
                features.extend(block);
            }
            rows.push(OutputRow {
                image_id,
                features,
                label: None,
            });
        }
        Ok(Self {
            model_ids,
            n_classes,
            rows,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EnsembleError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["image_id".to_string(), "model_id".to_string()];
        header.extend((0..self.n_classes).map(|k| format!("p_{k}")));
        w.write_record(&header)?;
        for row in &self.rows {
            for (m, model_id) in self.model_ids.iter().enumerate() {
                let mut rec = vec![row.image_id.clone(), model_id.clone()];
                rec.extend(self.block(&row.features, m).iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Attaches ground truth; images absent from `labels` stay unlabeled.
    pub fn with_labels(mut self, labels: &HashMap<String, usize>) -> Result<Self, EnsembleError> {
        for row in &mut self.rows {
            row.label = labels.get(&row.image_id).copied();
            if let Some(label) = row.label {
                if label >= self.n_classes {
                    return Err(EnsembleError::BadLabel {
                        label,
                        n_classes: self.n_classes,
                    });
                }
            }
        }
        Ok(self)
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.model_ids.len() * self.n_classes
    }

    pub fn rows(&self) -> &[OutputRow] {
        &self.rows
    }

    fn block<'a>(&self, features: &'a [f64], m: usize) -> &'a [f64] {
        &features[m * self.n_classes..(m + 1) * self.n_classes]
    }

    /// Model `model_id`'s prediction for every image, in row order.
    pub fn model_predictions(&self, model_id: &str) -> Result<Vec<PredictionVector>, EnsembleError> {
        let m = self
            .model_ids
            .iter()
            .position(|id| id == model_id)
            .ok_or_else(|| EnsembleError::UnknownModel(model_id.to_string()))?;
        Ok(self
            .rows
            .iter()
            .map(|r| PredictionVector(self.block(&r.features, m).to_vec()))
            .collect())
    }

    /// Mean over the listed models for every image, in row order.
    pub fn mean_over(&self, models: &[String]) -> Result<Vec<PredictionVector>, EnsembleError> {
        let idx = models
            .iter()
            .map(|id| {
                self.model_ids
                    .iter()
                    .position(|m| m == id)
                    .ok_or_else(|| EnsembleError::UnknownModel(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.rows
            .iter()
            .map(|r| {
                let members: Vec<PredictionVector> =
                    idx.iter().map(|&m| PredictionVector(self.block(&r.features, m).to_vec())).collect();
                mean_ensemble_probs(&members)
            })
            .collect()
    }

    /// Feature rows and labels of the labeled images.
    pub fn training_set(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        self.rows
            .iter()
            .filter_map(|r| r.label.map(|l| (r.features.clone(), l)))
            .unzip()
    }
}

// ---------------------------------------------------------------------------
// Boosted-tree stacker

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackerParams {
    pub rounds: usize,
    pub depth: usize,
    pub shrinkage: f64,
    /// Recorded for provenance; the fit itself draws no random numbers.
    pub seed: u64,
}

impl Default for StackerParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            depth: 3,
            shrinkage: 0.1,
            seed: 0,
        }
    }
}

pub const LEAF_CLIP: f64 = 4.0;
pub const STACKER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { value: f64 },
    /// `x[feature] < threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in a flat list; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    fn scaled(&self, factor: f64) -> RegressionTree {
        if factor == 1.0 {
            return self.clone();
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| match *n {
                TreeNode::Leaf { value } => TreeNode::Leaf { value: value * factor },
                split => split,
            })
            .collect();
        RegressionTree { nodes }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackerModel {
    pub format_version: u32,
    pub n_features: usize,
    pub n_classes: usize,
    pub shrinkage: f64,
    pub params: StackerParams,
    /// Empirical class frequencies of the training labels.
    pub priors: Vec<f64>,
    /// `rounds[r][k]` is the class-`k` tree of round `r`.
    pub rounds: Vec<Vec<RegressionTree>>,
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

fn log_priors(priors: &[f64]) -> Vec<f64> {
    priors.iter().map(|p| p.ln()).collect()
}

/// Mean softmax cross-entropy of `probs` against `labels`.
fn mean_cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

/// A fitted stacker together with the training loss before the first round
/// and after every round.
#[derive(Debug, Clone)]
pub struct StackerFit {
    pub model: StackerModel,
    pub loss_history: Vec<f64>,
}

/// Softmax gradient boosting: each round fits one least-squares regression
/// tree per class to the residual `onehot − p`, with exact greedy splits at
/// midpoints between consecutive distinct feature values and Newton leaf
/// values `Σr / Σp(1−p)` clipped to ±[`LEAF_CLIP`].
pub fn fit_stacker(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    params: StackerParams,
) -> Result<StackerFit, EnsembleError> {
    if features.len() != labels.len() {
        return Err(EnsembleError::LabelCount {
            rows: features.len(),
            labels: labels.len(),
        });
    }
    if !(params.shrinkage > 0.0 && params.shrinkage.is_finite()) {
        return Err(EnsembleError::BadParam("shrinkage must be positive".into()));
    }
    let n_features = features.first().map_or(0, Vec::len);
    if let Some(bad) = features.iter().find(|f| f.len() != n_features) {
        return Err(EnsembleError::Dimension {
            expected: n_features,
            got: bad.len(),
        });
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(EnsembleError::BadLabel { label: y, n_classes });
        }
        counts[y] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(EnsembleError::SingleClass);
    }
    let n = labels.len();
    let priors: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();

    let mut scores: Vec<Vec<f64>> = vec![log_priors(&priors); n];
    let mut probs: Vec<Vec<f64>> = vec![priors.clone(); n];
    let mut loss_history = vec![mean_cross_entropy(&probs, labels)];
    let mut rounds = Vec::with_capacity(params.rounds);
    let all: Vec<usize> = (0..n).collect();

    for _ in 0..params.rounds {
        let mut round = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            let residual: Vec<f64> = (0..n).map(|i| f64::from(u8::from(labels[i] == k)) - probs[i][k]).collect();
            let hessian: Vec<f64> = (0..n).map(|i| probs[i][k] * (1.0 - probs[i][k])).collect();
            let mut builder = TreeBuilder {
                features,
                residual: &residual,
                hessian: &hessian,
                max_depth: params.depth,
                nodes: Vec::new(),
            };
            builder.grow(&all, 0);
            round.push(RegressionTree { nodes: builder.nodes });
        }
        // Newton leaf steps do not guarantee a lower multiclass loss, so the
        // round is halved until it stops increasing the training loss (and
        // dropped to zero if no step helps).
        let previous = *loss_history.last().expect("history starts non-empty");
        let mut scale = 1.0;
        let (round, next_scores, next_probs, loss) = loop {
            let scaled: Vec<RegressionTree> = round.iter().map(|t| t.scaled(scale)).collect();
            let mut cand_scores = scores.clone();
            let mut cand_probs = probs.clone();
            for (i, x) in features.iter().enumerate() {
                for (k, tree) in scaled.iter().enumerate() {
                    cand_scores[i][k] += params.shrinkage * tree.eval(x);
                }
                cand_probs[i].copy_from_slice(&cand_scores[i]);
                softmax_in_place(&mut cand_probs[i]);
            }
            let loss = mean_cross_entropy(&cand_probs, labels);
            if loss <= previous || scale == 0.0 {
                break (scaled, cand_scores, cand_probs, loss);
            }
            scale = if scale < 1.0 / 1024.0 { 0.0 } else { scale * 0.5 };
        };
        scores = next_scores;
        probs = next_probs;
        loss_history.push(loss);
        rounds.push(round);
    }

    Ok(StackerFit {
        model: StackerModel {
            format_version: STACKER_FORMAT_VERSION,
            n_features,
            n_classes,
            shrinkage: params.shrinkage,
            params,
            priors,
            rounds,
        },
        loss_history,
    })
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    residual: &'a [f64],
    hessian: &'a [f64],
    max_depth: usize,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        let split = if depth < self.max_depth { self.best_split(rows) } else { None };
        match split {
            Some(s) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| self.features[i][s.feature] < s.threshold);
                let left = self.grow(&l, depth + 1);
                let right = self.grow(&r, depth + 1);
                self.nodes[id] = TreeNode::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left,
                    right,
                };
            }
            None => {
                let g: f64 = rows.iter().map(|&i| self.residual[i]).sum();
                let h: f64 = rows.iter().map(|&i| self.hessian[i]).sum();
                let value = if h > 0.0 { (g / h).clamp(-LEAF_CLIP, LEAF_CLIP) } else { 0.0 };
                self.nodes[id] = TreeNode::Leaf { value };
            }
        }
        id
    }

    /// Largest least-squares gain; ties keep the lowest feature index and
    /// then the lowest threshold.
    fn best_split(&self, rows: &[usize]) -> Option<BestSplit> {
        let n = rows.len() as f64;
        let total: f64 = rows.iter().map(|&i| self.residual[i]).sum();
        let base = total * total / n;
        let mut best: Option<BestSplit> = None;
        let n_features = self.features.first().map_or(0, Vec::len);
        let mut order = rows.to_vec();
        for f in 0..n_features {
            order.sort_by(|&a, &b| self.features[a][f].total_cmp(&self.features[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for j in 0..order.len() - 1 {
                left_sum += self.residual[order[j]];
                let (lo, hi) = (self.features[order[j]][f], self.features[order[j + 1]][f]);
                if lo == hi {
                    continue;
                }
                let nl = (j + 1) as f64;
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl + right_sum * right_sum / (n - nl) - base;
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = lo + (hi - lo) / 2.0;
                    // guard against a midpoint that rounds onto `hi`
                    let threshold = if mid > lo && mid <= hi { mid } else { hi };
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

impl StackerModel {
    /// Softmax of log-priors plus the shrunken tree outputs. A model with no
    /// rounds returns its stored priors unchanged.
    pub fn predict(&self, row: &[f64]) -> Result<PredictionVector, EnsembleError> {
        if row.len() != self.n_features {
            return Err(EnsembleError::Dimension {
                expected: self.n_features,
                got: row.len(),
            });
        }
        if self.rounds.is_empty() {
            return Ok(PredictionVector(self.priors.clone()));
        }
        let mut scores = log_priors(&self.priors);
        for round in &self.rounds {
            for (s, tree) in scores.iter_mut().zip(round) {
                *s += self.shrinkage * tree.eval(row);
            }
        }
        softmax_in_place(&mut scores);
        Ok(PredictionVector(scores))
    }

    pub fn to_json(&self) -> Result<String, EnsembleError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EnsembleError> {
        let model: StackerModel = serde_json::from_str(text)?;
        if model.format_version != STACKER_FORMAT_VERSION {
            return Err(EnsembleError::Version(model.format_version));
        }
        let valid = model.rounds.iter().flatten().flat_map(|t| &t.nodes).all(|n| match *n {
            TreeNode::Leaf { value } => value.is_finite(),
            TreeNode::Split { feature, .. } => feature < model.n_features,
        });
        if !valid || model.priors.len() != model.n_classes {
            return Err(EnsembleError::BadParam("stacker references invalid features or leaves".into()));
        }
        Ok(model)
    }
}

/// Stacker prediction for every row of a model-output matrix.
pub fn predict_stacker(model: &StackerModel, matrix: &ModelOutputMatrix) -> Result<Vec<PredictionVector>, EnsembleError> {
    matrix.rows().iter().map(|r| model.predict(&r.features)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, c: usize) -> PredictionVector {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        PredictionVector(raw.into_iter().map(|v| v / s).collect())
    }

    #[test]
    fn mean_probs_examples() {
        let one = PredictionVector(vec![0.2, 0.3, 0.5]);
        assert_eq!(mean_ensemble_probs(std::slice::from_ref(&one)).unwrap(), one);
        let opp = [PredictionVector::one_hot(3, 0), PredictionVector::one_hot(3, 2)];
        assert_eq!(mean_ensemble_probs(&opp).unwrap().0, vec![0.5, 0.0, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<_> = (0..15).map(|_| random_simplex(&mut rng, 7)).collect();
        let got = mean_ensemble_probs(&rows).unwrap();
        for k in 0..7 {
            let mut acc = 0.0;
            for r in &rows {
                acc += r.0[k];
            }
            assert!((got.0[k] - acc / 15.0).abs() < 1e-12);
        }
        assert!(mean_ensemble_probs(&[]).is_err());
        assert!(mean_ensemble_probs(&[PredictionVector(vec![1.0]), PredictionVector(vec![0.5, 0.5])]).is_err());
    }

    #[test]
    fn mean_masks_examples() {
        let ones = ProbMask::filled(4, 3, 1.0);
        let zeros = ProbMask::filled(4, 3, 0.0);
        let half = mean_ensemble_masks(&[ones.clone(), zeros]).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
        assert_eq!(mean_ensemble_masks(&[ones.clone(), ones.clone()]).unwrap(), ones);
        assert!(mean_ensemble_masks(&[ones, ProbMask::filled(3, 4, 1.0)]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let masks: Vec<ProbMask> = (0..3)
            .map(|_| ProbMask::new(16, 16, (0..256).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap())
            .collect();
        let got = mean_ensemble_masks(&masks).unwrap();
        for i in 0..256 {
            let want = (masks[0].data()[i] + masks[1].data()[i] + masks[2].data()[i]) / 3.0;
            assert_eq!(got.data()[i], want);
        }
    }

    #[test]
    fn top_models() {
        let s = |v: &[(&str, f64)]| v.iter().map(|(a, b)| (a.to_string(), *b)).collect::<Vec<_>>();
        let scores = s(&[("c", 0.7), ("a", 0.9), ("b", 0.8)]);
        assert_eq!(select_top_models(&scores, 2), vec!["a", "b"]);
        assert_eq!(select_top_models(&scores, 3).len(), 3);
        assert_eq!(select_top_models(&s(&[("b", 0.8), ("a", 0.8)]), 1), vec!["a"]);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<Vec<PredictionVector>> = (0..3).map(|_| (0..5).map(|_| random_simplex(&mut rng, 4)).collect()).collect();
        let m = ModelOutputMatrix::from_predictions(
            vec!["m0".into(), "m1".into(), "m2".into()],
            (0..5).map(|i| format!("img{i}")).collect(),
            &preds,
        )
        .unwrap();
        assert_eq!(m.n_features(), 12);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = ModelOutputMatrix::read_csv(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.model_predictions("m1").unwrap(), preds[1]);
        assert!(matches!(back.model_predictions("zz"), Err(EnsembleError::UnknownModel(_))));
    }

    #[test]
    fn matrix_csv_rejects_bad_input() {
        let missing = "image_id,model_id,p_0,p_1\na,m0,0.5,0.5\na,m1,0.5,0.5\nb,m0,1,0\n";
        assert!(matches!(
            ModelOutputMatrix::read_csv(missing.as_bytes()),
            Err(EnsembleError::MissingOutput { .. })
        ));
        let dup = "image_id,model_id,p_0,p_1\na,m0,0.5,0.5\na,m0,0.5,0.5\n";
        assert!(matches!(
            ModelOutputMatrix::read_csv(dup.as_bytes()),
            Err(EnsembleError::DuplicateOutput { .. })
        ));
        let off = "image_id,model_id,p_0,p_1\na,m0,0.7,0.5\n";
        assert!(matches!(ModelOutputMatrix::read_csv(off.as_bytes()), Err(EnsembleError::BadRow { row: 2, .. })));
        let header = "id,model_id,p_0\n";
        assert!(matches!(ModelOutputMatrix::read_csv(header.as_bytes()), Err(EnsembleError::BadHeader(_))));
    }

    fn toy_set() -> (Vec<Vec<f64>>, Vec<usize>) {
        // one model's probability of class 1; label 1 exactly when it is > 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..60)
            .map(|_| {
                let p: f64 = rng.random_range(0.0..1.0);
                (vec![1.0 - p, p], usize::from(p > 0.5))
            })
            .unzip()
    }

    #[test]
    fn zero_rounds_gives_priors() {
        let x = vec![vec![0.1], vec![0.2], vec![0.3], vec![0.9]];
        let y = vec![0, 1, 1, 2];
        let fit = fit_stacker(&x, &y, 3, StackerParams { rounds: 0, ..Default::default() }).unwrap();
        for row in [[0.0], [0.5], [100.0]] {
            assert_eq!(fit.model.predict(&row).unwrap().0, vec![0.25, 0.5, 0.25]);
        }
        assert_eq!(fit.loss_history.len(), 1);
    }

    #[test]
    fn separable_toy_is_fit_perfectly() {
        let (x, y) = toy_set();
        let fit = fit_stacker(&x, &y, 2, StackerParams { rounds: 20, depth: 1, shrinkage: 0.1, seed: 0 }).unwrap();
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(fit.model.predict(row).unwrap().argmax(), label);
        }
        assert!(fit.model.rounds.iter().flatten().all(|t| t.depth() <= 1));
    }

    #[test]
    fn refit_is_byte_identical() {
        let (x, y) = toy_set();
        let p = StackerParams { rounds: 15, depth: 3, shrinkage: 0.2, seed: 9 };
        let a = fit_stacker(&x, &y, 2, p).unwrap().model.to_json().unwrap();
        let b = fit_stacker(&x, &y, 2, p).unwrap().model.to_json().unwrap();
        assert_eq!(a, b);
        let back = StackerModel::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
    }

    #[test]
    fn stacker_errors() {
        assert!(matches!(
            fit_stacker(&[vec![0.0], vec![1.0]], &[1, 1], 2, StackerParams::default()),
            Err(EnsembleError::SingleClass)
        ));
        let (x, y) = toy_set();
        let m = fit_stacker(&x, &y, 2, StackerParams { rounds: 2, ..Default::default() }).unwrap().model;
        assert!(matches!(m.predict(&[0.5]), Err(EnsembleError::Dimension { expected: 2, got: 1 })));
        let mut json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        json["format_version"] = 99.into();
        assert!(matches!(StackerModel::from_json(&json.to_string()), Err(EnsembleError::Version(99))));
    }

    fn corpus() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize, f64)> {
        (2usize..5, 10usize..60, any::<u64>(), 0.01f64..=0.3).prop_map(|(c, n, seed, shrink)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let label = if i < c { i } else { rng.random_range(0..c) };
                let mut row = Vec::new();
                for _ in 0..2 {
                    let mut p = random_simplex(&mut rng, c).0;
                    p[label] += rng.random_range(0.0..1.0);
                    let s: f64 = p.iter().sum();
                    row.extend(p.into_iter().map(|v| v / s));
                }
                x.push(row);
                y.push(label);
            }
            (x, y, c, shrink)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn training_loss_never_increases((x, y, c, shrink) in corpus()) {
            let fit = fit_stacker(&x, &y, c, StackerParams { rounds: 25, depth: 3, shrinkage: shrink, seed: 0 }).unwrap();
            for w in fit.loss_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", fit.loss_history);
            }
            let row = &x[0];
            let p = fit.model.predict(row).unwrap();
            prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn mean_is_permutation_invariant(seed in any::<u64>(), m in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<_> = (0..m).map(|_| random_simplex(&mut rng, 5)).collect();
            let mut rev = rows.clone();
            rev.reverse();
            let a = mean_ensemble_probs(&rows).unwrap();
            let b = mean_ensemble_probs(&rev).unwrap();
            prop_assert_eq!(a.argmax(), b.argmax());
            for (u, v) in a.0.iter().zip(&b.0) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            let same = vec![rows[0].clone(); m];
            let s = mean_ensemble_probs(&same).unwrap();
            for (u, v) in s.0.iter().zip(&rows[0].0) {
                prop_assert!((u - v).abs() <= 1e-15);
            }
        }
    }
}
