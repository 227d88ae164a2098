//! Predictors. `file_import` is the bridge to networks trained elsewhere;
//! the other kinds are small built-in models that make desk-scale runs of
//! all three pipelines possible.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{EnsembleError, ModelOutputMatrix};
use crate::imgops::io::{read_prob, PngError};
use crate::imgops::{ImageError, ProbMask, RasterImage, Resize, ResizeMode, CHANNELS};
use crate::metrics::{weighted_cross_entropy, ClassWeights, MetricError};
use crate::prediction::PredictionVector;
use crate::trainsched::{run_training_loop, LoopConfig, LrSchedule, Monitor, PlateauConfig, TrainError, Trainable, TrainingLog};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid predictor: {0}")]
    Invalid(String),
    #[error("no imported prediction for image {0}")]
    MissingImage(String),
    #[error("{0} predictors do not produce {1}")]
    Unsupported(&'static str, &'static str),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Png(#[from] PngError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ---------------------------------------------------------------------------
// Features

pub const HIST_BINS: usize = 8;
pub const FEATURE_DIM: usize = CHANNELS * (2 + HIST_BINS);

/// Per channel: mean, population std, then an 8-bin histogram of values
/// (fractions of pixels), channel blocks in R, G, B order.
pub fn color_features(img: &RasterImage) -> Vec<f64> {
    let n = (img.width() * img.height()) as f64;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for ch in 0..CHANNELS {
        let values = img.data().iter().skip(ch).step_by(CHANNELS);
        let mut hist = [0.0; HIST_BINS];
        let (mut sum, mut sq) = (0.0, 0.0);
        for &v in values {
            sum += v;
            sq += v * v;
            hist[((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1.0;
        }
        let mean = sum / n;
        out.push(mean);
        out.push((sq / n - mean * mean).max(0.0).sqrt());
        out.extend(hist.iter().map(|h| h / n));
    }
    out
}

// ---------------------------------------------------------------------------
// Specs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxParams {
    /// Row-major `C × FEATURE_DIM`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Standardization applied to features before the linear map.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl LinearSoftmaxParams {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            weights: vec![vec![0.0; FEATURE_DIM]; n_classes],
            bias: vec![0.0; n_classes],
            feature_mean: vec![0.0; FEATURE_DIM],
            feature_std: vec![1.0; FEATURE_DIM],
        }
    }

    fn scores(&self, features: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = features
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect();
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&z).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorKind {
    FileImport {
        /// Long-format model output CSV for classification.
        #[serde(default)]
        predictions: Option<PathBuf>,
        /// Which model's rows to use when the CSV holds several.
        #[serde(default)]
        model_id: Option<String>,
        /// Directory of 16-bit `<image_id>.png` probability masks.
        #[serde(default)]
        masks_dir: Option<PathBuf>,
    },
    Constant {
        probs: Vec<f64>,
    },
    ColorThresholdSegmenter {
        threshold: f64,
        softness: f64,
        /// Model resolution `[width, height]`; native size when absent.
        #[serde(default)]
        resolution: Option<[usize; 2]>,
    },
    LinearSoftmax(LinearSoftmaxParams),
}

impl PredictorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorKind::FileImport { .. } => "file_import",
            PredictorKind::Constant { .. } => "constant",
            PredictorKind::ColorThresholdSegmenter { .. } => "color_threshold_segmenter",
            PredictorKind::LinearSoftmax(_) => "linear_softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    #[serde(flatten)]
    pub kind: PredictorKind,
    #[serde(default)]
    pub checkpoint: String,
}

impl PredictorSpec {
    pub fn new(kind: PredictorKind) -> Self {
        Self {
            kind,
            checkpoint: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Invalid(m));
        match &self.kind {
            PredictorKind::FileImport {
                predictions, masks_dir, ..
            } => {
                if predictions.is_none() && masks_dir.is_none() {
                    return bad("file_import needs predictions and/or masks_dir".into());
                }
            }
            PredictorKind::Constant { probs } => {
                if !PredictionVector(probs.clone()).is_simplex(1e-9) {
                    return bad(format!("constant probabilities {probs:?} are not on the simplex"));
                }
            }
            PredictorKind::ColorThresholdSegmenter {
                threshold,
                softness,
                resolution,
            } => {
                if !(0.0..=1.0).contains(threshold) || !(*softness > 0.0 && softness.is_finite()) {
                    return bad(format!("threshold {threshold} / softness {softness}"));
                }
                if resolution.is_some_and(|[w, h]| w == 0 || h == 0) {
                    return bad("resolution must be positive".into());
                }
            }
            PredictorKind::LinearSoftmax(p) => {
                let dims_ok = p.weights.len() >= 2
                    && p.weights.len() == p.bias.len()
                    && p.weights.iter().all(|w| w.len() == FEATURE_DIM)
                    && p.feature_mean.len() == FEATURE_DIM
                    && p.feature_std.len() == FEATURE_DIM;
                if !dims_ok {
                    return bad(format!("linear_softmax needs >=2 classes of {FEATURE_DIM} weights"));
                }
                let finite = p.weights.iter().flatten().chain(&p.bias).chain(&p.feature_mean).all(|v| v.is_finite());
                if !finite || p.feature_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return bad("linear_softmax parameters must be finite with positive std".into());
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let f = File::open(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let spec: PredictorSpec = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| BackendError::Invalid(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor specs always serialize")
    }
}

/// A validated spec plus whatever it needs loaded (imported tables).
#[derive(Debug, Clone)]
pub struct Predictor {
    spec: PredictorSpec,
    imported: HashMap<String, PredictionVector>,
}

impl Predictor {
    /// Relative file-import paths resolve against `base_dir`.
    pub fn new(spec: PredictorSpec, base_dir: &Path) -> Result<Self, BackendError> {
        spec.validate()?;
        let mut imported = HashMap::new();
        if let PredictorKind::FileImport {
            predictions: Some(csv_path),
            model_id,
            ..
        } = &spec.kind
        {
            let path = base_dir.join(csv_path);
            let f = File::open(&path).map_err(|source| BackendError::Io { path, source })?;
            let matrix = ModelOutputMatrix::read_csv(BufReader::new(f))?;
            let model = match model_id {
                Some(m) => m.clone(),
                None if matrix.model_ids().len() == 1 => matrix.model_ids()[0].clone(),
                None => return Err(BackendError::Invalid("csv holds several models; set model_id".into())),
            };
            let preds = matrix.model_predictions(&model)?;
            imported = matrix.rows().iter().map(|r| r.image_id.clone()).zip(preds).collect();
        }
        let spec = match spec.kind {
            PredictorKind::FileImport {
                predictions,
                model_id,
                masks_dir: Some(dir),
            } => PredictorSpec {
                kind: PredictorKind::FileImport {
                    predictions,
                    model_id,
                    masks_dir: Some(base_dir.join(dir)),
                },
                checkpoint: spec.checkpoint,
            },
            _ => spec,
        };
        Ok(Self { spec, imported })
    }

    pub fn spec(&self) -> &PredictorSpec {
        &self.spec
    }

    pub fn predict_class(&self, image_id: &str, img: &RasterImage) -> Result<PredictionVector, BackendError> {
        match &self.spec.kind {
            PredictorKind::FileImport { predictions: None, .. } => Err(BackendError::Unsupported("mask-only file_import", "class vectors")),
            PredictorKind::FileImport { .. } => self
                .imported
                .get(image_id)
                .cloned()
                .ok_or_else(|| BackendError::MissingImage(image_id.to_string())),
            PredictorKind::Constant { probs } => Ok(PredictionVector(probs.clone())),
            PredictorKind::LinearSoftmax(p) => Ok(PredictionVector::softmax(&p.scores(&color_features(img)))),
            PredictorKind::ColorThresholdSegmenter { .. } => Err(BackendError::Unsupported(self.spec.kind.name(), "class vectors")),
        }
    }

    pub fn predict_mask(&self, image_id: &str, img: &RasterImage) -> Result<ProbMask, BackendError> {
        match &self.spec.kind {
            PredictorKind::ColorThresholdSegmenter {
                threshold,
                softness,
                resolution,
            } => {
                let resized;
                let input = match resolution {
                    Some([w, h]) if (*w, *h) != (img.width(), img.height()) => {
                        resized = img.resize(*w, *h, ResizeMode::Bilinear)?;
                        &resized
                    }
                    _ => img,
                };
                let data = input
                    .luminance()
                    .into_iter()
                    .map(|l| 1.0 / (1.0 + (-(threshold - l) / softness).exp()))
                    .collect();
                Ok(ProbMask::new(input.width(), input.height(), data)?)
            }
            PredictorKind::FileImport { masks_dir: Some(dir), .. } => {
                let path = dir.join(format!("{image_id}.png"));
                if !path.exists() {
                    return Err(BackendError::MissingImage(image_id.to_string()));
                }
                Ok(read_prob(&path)?)
            }
            kind => Err(BackendError::Unsupported(kind.name(), "masks")),
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTrainConfig {
    pub plateau: PlateauConfig,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience; `None` trains for `max_epochs`.
    pub patience: Option<usize>,
    /// Weight the loss by inverse class frequency.
    pub class_weighted: bool,
    pub seed: u64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        Self {
            plateau: PlateauConfig {
                start_lr: 0.05,
                factor: 0.1,
                patience: 5,
                floor_lr: 1e-5,
            },
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 60,
            patience: Some(22),
            class_weighted: true,
            seed: 0,
        }
    }
}

struct LinearModel<'a> {
    x: Vec<Vec<f64>>,
    y: &'a [usize],
    val_x: Vec<Vec<f64>>,
    val_y: &'a [usize],
    class_w: ClassWeights,
    params: LinearSoftmaxParams,
    vel_w: Vec<Vec<f64>>,
    vel_b: Vec<f64>,
    momentum: f64,
    best: LinearSoftmaxParams,
}

impl Trainable for LinearModel<'_> {
    type Batch = Vec<usize>;
    type Error = MetricError;

    fn train_step(&mut self, batch: &Vec<usize>, lr: f64) -> Result<f64, MetricError> {
        let c = self.params.bias.len();
        let mut grad_w = vec![vec![0.0; FEATURE_DIM]; c];
        let mut grad_b = vec![0.0; c];
        let mut probs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in batch {
            // features are stored standardized; the stored mean/std apply
            // only at inference time
            let p = softmax_raw(&self.params.weights, &self.params.bias, &self.x[i]);
            let y = self.y[i];
            let w = self.class_w.0[y];
            for k in 0..c {
                let d = w * (p.0[k] - f64::from(u8::from(k == y))) / batch.len() as f64;
                grad_b[k] += d;
                for (g, x) in grad_w[k].iter_mut().zip(&self.x[i]) {
                    *g += d * x;
                }
            }
            probs.push(p);
            labels.push(y);
        }
        let loss = weighted_cross_entropy(&probs, &labels, &self.class_w)?;
        for k in 0..c {
            self.vel_b[k] = self.momentum * self.vel_b[k] - lr * grad_b[k];
            self.params.bias[k] += self.vel_b[k];
            for j in 0..FEATURE_DIM {
                self.vel_w[k][j] = self.momentum * self.vel_w[k][j] - lr * grad_w[k][j];
                self.params.weights[k][j] += self.vel_w[k][j];
            }
        }
        Ok(loss)
    }

    fn validate(&mut self) -> Result<f64, MetricError> {
        let probs: Vec<PredictionVector> = self
            .val_x
            .iter()
            .map(|x| softmax_raw(&self.params.weights, &self.params.bias, x))
            .collect();
        weighted_cross_entropy(&probs, self.val_y, &self.class_w)
    }

    fn checkpoint(&mut self, epoch: usize) -> String {
        self.best.weights.clone_from(&self.params.weights);
        self.best.bias.clone_from(&self.params.bias);
        format!("linear_softmax@epoch{epoch}")
    }
}

fn softmax_raw(weights: &[Vec<f64>], bias: &[f64], z: &[f64]) -> PredictionVector {
    let scores: Vec<f64> = weights
        .iter()
        .zip(bias)
        .map(|(w, b)| b + w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>())
        .collect();
    PredictionVector::softmax(&scores)
}

/// Multinomial logistic regression on [`color_features`] rows, trained by
/// momentum SGD under a reduce-on-plateau schedule with (optionally
/// class-weighted) cross-entropy. Returns the spec checkpointed at the best
/// validation epoch, together with the training log. An empty validation
/// set falls back to validating on the training rows.
pub fn train_linear_softmax(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    n_classes: usize,
    cfg: &LinearTrainConfig,
) -> Result<(PredictorSpec, TrainingLog), BackendError> {
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(BackendError::Invalid("features and labels differ in length".into()));
    }
    if train_x.iter().chain(val_x).any(|x| x.len() != FEATURE_DIM) {
        return Err(BackendError::Invalid(format!("feature rows must have {FEATURE_DIM} values")));
    }
    if cfg.batch_size == 0 {
        return Err(BackendError::Invalid("batch_size must be at least 1".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &y in train_y.iter().chain(val_y) {
        if y >= n_classes {
            return Err(MetricError::LabelOutOfRange { label: y, n_classes }.into());
        }
    }
    for &y in train_y {
        counts[y] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(BackendError::Invalid("training needs at least two classes present".into()));
    }
    let class_w = if cfg.class_weighted {
        // classes missing from training never contribute a loss term
        let max = *counts.iter().max().expect("non-empty") as f64;
        ClassWeights(counts.iter().map(|&c| if c == 0 { 0.0 } else { max / c as f64 }).collect())
    } else {
        ClassWeights::uniform(n_classes)
    };

    let n = train_x.len() as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    let mut std = vec![0.0; FEATURE_DIM];
    for x in train_x {
        for j in 0..FEATURE_DIM {
            mean[j] += x[j] / n;
        }
    }
    for x in train_x {
        for j in 0..FEATURE_DIM {
            std[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let standardize = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|x| x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    };
    let (vx, vy) = if val_x.is_empty() { (train_x, train_y) } else { (val_x, val_y) };

    let zeros = LinearSoftmaxParams::zeros(n_classes);
    let mut model = LinearModel {
        x: standardize(train_x),
        y: train_y,
        val_x: standardize(vx),
        val_y: vy,
        class_w,
        vel_w: zeros.weights.clone(),
        vel_b: zeros.bias.clone(),
        params: zeros.clone(),
        momentum: cfg.momentum,
        best: zeros,
    };

    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let seed = cfg.seed;
    let batch_size = cfg.batch_size;
    let mut source = move |epoch: usize| -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    };
    let loop_cfg = LoopConfig {
        schedule: LrSchedule::Plateau(cfg.plateau),
        patience: cfg.patience,
        max_epochs: cfg.max_epochs,
        monitor: Monitor::Loss,
    };
    let log = run_training_loop(&mut model, &mut source, &loop_cfg)?;

    let spec = PredictorSpec {
        kind: PredictorKind::LinearSoftmax(LinearSoftmaxParams {
            weights: model.best.weights,
            bias: model.best.bias,
            feature_mean: mean,
            feature_std: std,
        }),
        checkpoint: log.best_tag.clone(),
    };
    Ok((spec, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgops::{binarize, BinaryMask};
    use crate::metrics::{balanced_accuracy, jaccard, ConfusionMatrix};
    use rand::Rng;

    fn predictor(kind: PredictorKind) -> Predictor {
        Predictor::new(PredictorSpec::new(kind), Path::new(".")).unwrap()
    }

    #[test]
    fn constant_and_zero_linear() {
        let img = RasterImage::filled(5, 5, [0.3, 0.2, 0.9]);
        let p = predictor(PredictorKind::Constant { probs: vec![0.25; 4] });
        assert_eq!(p.predict_class("x", &img).unwrap().0, vec![0.25; 4]);
        let z = predictor(PredictorKind::LinearSoftmax(LinearSoftmaxParams::zeros(3)));
        let u = z.predict_class("x", &img).unwrap();
        assert!(u.0.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(p.predict_mask("x", &img), Err(BackendError::Unsupported(..))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            PredictorKind::Constant { probs: vec![0.5, 0.6] },
            PredictorKind::ColorThresholdSegmenter { threshold: 0.5, softness: 0.0, resolution: None },
            PredictorKind::FileImport { predictions: None, model_id: None, masks_dir: None },
            PredictorKind::LinearSoftmax(LinearSoftmaxParams { bias: vec![0.0], ..LinearSoftmaxParams::zeros(2) }),
        ];
        for kind in bad {
            assert!(PredictorSpec::new(kind).validate().is_err());
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = PredictorSpec {
            kind: PredictorKind::ColorThresholdSegmenter { threshold: 0.45, softness: 0.05, resolution: Some([64, 48]) },
            checkpoint: "v1".into(),
        };
        let text = spec.to_json();
        assert!(text.contains("\"kind\": \"color_threshold_segmenter\""));
        assert_eq!(serde_json::from_str::<PredictorSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn file_import_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let preds = vec![vec![
            PredictionVector(vec![0.1, 0.2, 0.7]),
            PredictionVector(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
        ]];
        let m = ModelOutputMatrix::from_predictions(vec!["cnn".into()], vec!["a".into(), "b".into()], &preds).unwrap();
        m.write_csv(File::create(dir.path().join("p.csv")).unwrap()).unwrap();
        let p = Predictor::new(
            PredictorSpec::new(PredictorKind::FileImport {
                predictions: Some("p.csv".into()),
                model_id: None,
                masks_dir: None,
            }),
            dir.path(),
        )
        .unwrap();
        let img = RasterImage::filled(2, 2, [0.0; 3]);
        for (id, want) in ["a", "b"].iter().zip(&preds[0]) {
            let got = p.predict_class(id, &img).unwrap();
            assert!(got.0.iter().zip(&want.0).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(matches!(p.predict_class("zz", &img), Err(BackendError::MissingImage(_))));
    }

    #[test]
    fn segmenter_fixed_point_and_monotonicity() {
        let dark = RasterImage::filled(6, 4, [0.1, 0.05, 0.1]);
        let seg = predictor(PredictorKind::ColorThresholdSegmenter { threshold: 0.5, softness: 0.1, resolution: None });
        assert!(seg.predict_mask("d", &dark).unwrap().data().iter().all(|&v| v > 0.5));
        let gray = RasterImage::filled(3, 3, [0.4; 3]);
        let t = gray.luminance()[0];
        let at = predictor(PredictorKind::ColorThresholdSegmenter { threshold: t, softness: 0.07, resolution: Some([5, 7]) });
        let m = at.predict_mask("g", &gray).unwrap();
        assert_eq!((m.width(), m.height()), (5, 7));
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn segmenter_finds_dark_ellipse() {
        let (w, h) = (96, 80);
        let truth = BinaryMask::from_fn(w, h, |r, c| {
            let (dy, dx) = ((r as f64 - 40.0) / 22.0, (c as f64 - 50.0) / 30.0);
            dx * dx + dy * dy <= 1.0
        });
        let mut img = RasterImage::filled(w, h, [0.9, 0.75, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in 0..h {
            for c in 0..w {
                let n = rng.random_range(-0.04..0.04);
                let base = if truth.get(r, c) { [0.35, 0.2, 0.15] } else { [0.9, 0.75, 0.7] };
                img.set_pixel(r, c, base.map(|v| v + n));
            }
        }
        let seg = predictor(PredictorKind::ColorThresholdSegmenter { threshold: 0.5, softness: 0.05, resolution: None });
        let pred = binarize(&seg.predict_mask("e", &img).unwrap(), 0.5);
        assert!(jaccard(&pred, &truth).unwrap() >= 0.9);
    }

    fn blob_image(rng: &mut ChaCha8Rng, base: [f64; 3]) -> RasterImage {
        let mut img = RasterImage::filled(16, 16, base);
        for r in 0..16 {
            for c in 0..16 {
                img.set_pixel(r, c, base.map(|v| v + rng.random_range(-0.08..0.08)));
            }
        }
        img
    }

    fn evaluate(spec: &PredictorSpec, x: &[RasterImage], y: &[usize], n: usize) -> ConfusionMatrix {
        let p = Predictor::new(spec.clone(), Path::new(".")).unwrap();
        let pred: Vec<usize> = x.iter().map(|img| p.predict_class("", img).unwrap().argmax()).collect();
        ConfusionMatrix::from_pairs(n, y, &pred).unwrap()
    }

    fn colour_set(seed: u64, per_class: [usize; 2]) -> (Vec<RasterImage>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases = [[0.6, 0.35, 0.3], [0.35, 0.3, 0.55]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (k, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                x.push(blob_image(&mut rng, bases[k]));
                y.push(k);
            }
        }
        (x, y)
    }

    #[test]
    fn linear_softmax_separates_colours() {
        let (tx, ty) = colour_set(1, [30, 30]);
        let (hx, hy) = colour_set(2, [20, 20]);
        let feats: Vec<Vec<f64>> = tx.iter().map(color_features).collect();
        let (spec, log) = train_linear_softmax(&feats[..40], &ty[..40], &feats[40..], &ty[40..], 2, &LinearTrainConfig::default()).unwrap();
        assert!(log.best_epoch > 0);
        assert!(spec.checkpoint.ends_with(&format!("epoch{}", log.best_epoch)));
        let cm = evaluate(&spec, &hx, &hy, 2);
        assert!(balanced_accuracy(&cm).unwrap() >= 0.95);
    }

    #[test]
    fn weighted_loss_recovers_minority() {
        let (tx, ty) = colour_set(3, [90, 10]);
        let feats: Vec<Vec<f64>> = tx.iter().map(color_features).collect();
        let (spec, _) = train_linear_softmax(&feats, &ty, &[], &[], 2, &LinearTrainConfig::default()).unwrap();
        let (hx, hy) = colour_set(4, [90, 10]);
        let cm = evaluate(&spec, &hx, &hy, 2);
        assert!(cm.get(1, 1) as f64 / cm.row_sum(1) as f64 >= 0.9);
    }

    #[test]
    fn zero_epochs_is_uniform() {
        let (tx, ty) = colour_set(5, [5, 5]);
        let feats: Vec<Vec<f64>> = tx.iter().map(color_features).collect();
        let cfg = LinearTrainConfig { max_epochs: 0, ..Default::default() };
        let (spec, log) = train_linear_softmax(&feats, &ty, &[], &[], 2, &cfg).unwrap();
        assert!(log.epochs.is_empty());
        let p = Predictor::new(spec, Path::new(".")).unwrap().predict_class("", &tx[0]).unwrap();
        assert_eq!(p.0, vec![0.5, 0.5]);
    }

    #[test]
    fn training_is_deterministic() {
        let (tx, ty) = colour_set(6, [12, 12]);
        let feats: Vec<Vec<f64>> = tx.iter().map(color_features).collect();
        let cfg = LinearTrainConfig { max_epochs: 5, ..Default::default() };
        let a = train_linear_softmax(&feats, &ty, &[], &[], 2, &cfg).unwrap();
        let b = train_linear_softmax(&feats, &ty, &[], &[], 2, &cfg).unwrap();
        assert_eq!(a.0.to_json(), b.0.to_json());
    }

    #[test]
    fn feature_layout() {
        let img = RasterImage::filled(4, 4, [0.0, 0.5, 1.0]);
        let f = color_features(&img);
        assert_eq!(f.len(), FEATURE_DIM);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 1.0);
        assert_eq!(f[10], 0.5);
        assert_eq!(f[12 + 4], 1.0);
        assert_eq!(f[20 + 2 + 7], 1.0);
    }
}
