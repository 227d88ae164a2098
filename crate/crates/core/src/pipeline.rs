//! The three task pipelines assembled from the building blocks. The CLI is
//! a thin layer over these functions, so a library caller composing them in
//! the same order gets identical results.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{average_replica_predictions, make_tta_replicas, sample_augmentation, apply_augmentation, AugmentSpec, TtaMode};
use crate::backend::{color_features, train_linear_softmax, BackendError, LinearTrainConfig, Predictor, PredictorKind, PredictorSpec};
use crate::config::derive_seed;
use crate::ensemble::{mean_ensemble_masks, mean_ensemble_probs, EnsembleError};
use crate::imgops::{binarize, fill_holes, BinaryMask, ImageError, ProbMask, RasterImage, Resize, ResizeMode};
use crate::manifest::{Manifest, ManifestError, Role, Splits};
use crate::metrics::{balanced_accuracy, jaccard, threshold_jaccard, ConfusionMatrix, MetricError};
use crate::prediction::{PredictionError, PredictionVector};
use crate::superpixel::{
    compose_attribute_masks, extract_patch, prune, slic_segment, AttributeMasks, AttributePrediction, PruneRule, SlicParams,
    SuperpixelError, SuperpixelMap,
};
use crate::trainsched::TrainingLog;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Superpixel(#[from] SuperpixelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error("image {0} is not loaded")]
    MissingImage(String),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Task 1: segmentation

/// Where binarization happens relative to resizing back to the image size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegOrder {
    /// average → bilinear upsample → binarize → fill holes
    #[default]
    UpsampleFirst,
    /// average → binarize → fill holes → nearest upsample
    BinarizeFirst,
}

impl std::str::FromStr for SegOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "upsample_first" => Ok(SegOrder::UpsampleFirst),
            "binarize_first" => Ok(SegOrder::BinarizeFirst),
            other => Err(format!("unknown order `{other}` (upsample_first | binarize_first)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegPostprocess {
    pub threshold: f64,
    pub order: SegOrder,
}

impl Default for SegPostprocess {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            order: SegOrder::UpsampleFirst,
        }
    }
}

/// Turns one image's model masks into the final binary lesion mask at
/// `width × height`.
pub fn postprocess_segmentation(
    masks: &[ProbMask],
    width: usize,
    height: usize,
    cfg: &SegPostprocess,
) -> Result<BinaryMask, PipelineError> {
    Ok(match cfg.order {
        SegOrder::UpsampleFirst => {
            let up = masks
                .iter()
                .map(|m| resize_to(m, width, height))
                .collect::<Result<Vec<_>, _>>()?;
            fill_holes(&binarize(&mean_ensemble_masks(&up)?, cfg.threshold))
        }
        SegOrder::BinarizeFirst => {
            // average on the first model's grid
            let (gw, gh) = masks.first().map_or((width, height), |m| (m.width(), m.height()));
            let common = masks
                .iter()
                .map(|m| resize_to(m, gw, gh))
                .collect::<Result<Vec<_>, _>>()?;
            let filled = fill_holes(&binarize(&mean_ensemble_masks(&common)?, cfg.threshold));
            filled.resize(width, height, ResizeMode::Nearest)?
        }
    })
}

fn resize_to(m: &ProbMask, width: usize, height: usize) -> Result<ProbMask, PipelineError> {
    if m.width() == width && m.height() == height {
        Ok(m.clone())
    } else {
        Ok(m.resize(width, height, ResizeMode::Bilinear)?)
    }
}

/// Every segmenter's mask for `img`, averaged and post-processed.
pub fn segment_image(
    predictors: &[Predictor],
    image_id: &str,
    img: &RasterImage,
    cfg: &SegPostprocess,
) -> Result<BinaryMask, PipelineError> {
    let masks = predictors
        .iter()
        .map(|p| p.predict_mask(image_id, img))
        .collect::<Result<Vec<_>, _>>()?;
    postprocess_segmentation(&masks, img.width(), img.height(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub n_images: usize,
    pub mean_threshold_jaccard: f64,
    pub mean_jaccard: f64,
}

pub fn evaluate_segmentation(pred: &[BinaryMask], gt: &[BinaryMask], tau: f64) -> Result<SegReport, PipelineError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()).into());
    }
    let (mut tj, mut j) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        tj += threshold_jaccard(p, g, tau)?;
        j += jaccard(p, g)?;
    }
    let n = pred.len() as f64;
    Ok(SegReport {
        n_images: pred.len(),
        mean_threshold_jaccard: tj / n,
        mean_jaccard: j / n,
    })
}

// ---------------------------------------------------------------------------
// Task 2: attributes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeConfig {
    pub slic: SlicParams,
    pub patch_size: usize,
    pub replicas: usize,
    pub augment: AugmentSpec,
    pub prune: Option<PruneRule>,
    pub seed: u64,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            slic: SlicParams::default(),
            patch_size: 64,
            replicas: TtaMode::FlipsColorOnly.default_replicas(),
            augment: AugmentSpec::scenario_j(),
            prune: Some(PruneRule::default()),
            seed: 0,
        }
    }
}

/// Key of one superpixel in imported per-superpixel predictions.
pub fn superpixel_id(image_id: &str, region: usize) -> String {
    format!("{image_id}#{region}")
}

/// Scores every superpixel of `img` with a six-class predictor. Built-in
/// predictors see the centred patch, averaged over flips/colour replicas;
/// imported predictions are looked up by [`superpixel_id`].
pub fn classify_superpixels(
    predictor: &Predictor,
    image_id: &str,
    img: &RasterImage,
    sp: &SuperpixelMap,
    cfg: &AttributeConfig,
) -> Result<Vec<PredictionVector>, PipelineError> {
    let imported = matches!(predictor.spec().kind, PredictorKind::FileImport { .. });
    (0..sp.k())
        .map(|region| {
            let key = superpixel_id(image_id, region);
            if imported {
                return Ok(predictor.predict_class(&key, img)?);
            }
            let patch = extract_patch(img, sp, region, cfg.patch_size)?;
            if cfg.replicas <= 1 {
                return Ok(predictor.predict_class(&key, &patch)?);
            }
            let seed = derive_seed(cfg.seed, &key);
            let preds = make_tta_replicas(&patch, cfg.replicas, TtaMode::FlipsColorOnly, &cfg.augment, seed)
                .iter()
                .map(|r| predictor.predict_class(&key, r))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(average_replica_predictions(&preds)?)
        })
        .collect()
}

/// argmax → optional pruning → mask composition.
pub fn attribute_masks_from_scores(
    sp: &SuperpixelMap,
    scores: Vec<PredictionVector>,
    rule: Option<PruneRule>,
) -> Result<(AttributePrediction, AttributeMasks), PipelineError> {
    let mut pred = AttributePrediction::from_scores(scores)?;
    if let Some(rule) = rule {
        pred = prune(&pred, rule)?;
    }
    let masks = compose_attribute_masks(sp, &pred)?;
    Ok((pred, masks))
}

/// Task 2 over a batch of images: SLIC, per-superpixel scoring, optional
/// pruning and mask composition. Images run in parallel; the output follows
/// the input order.
pub fn compose_attributes(
    predictor: &Predictor,
    images: &[(String, RasterImage)],
    cfg: &AttributeConfig,
) -> Result<Vec<(AttributePrediction, AttributeMasks)>, PipelineError> {
    images
        .par_iter()
        .map(|(id, img)| {
            let sp = slic_segment(img, cfg.slic)?;
            let scores = classify_superpixels(predictor, id, img, &sp, cfg)?;
            attribute_masks_from_scores(&sp, scores, cfg.prune)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Task 3: diagnosis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub augment: AugmentSpec,
    pub tta_mode: TtaMode,
    /// 1 predicts on the untouched image.
    pub replicas: usize,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            augment: AugmentSpec::scenario_j(),
            tta_mode: TtaMode::FullScenarioJ,
            replicas: 32,
            seed: 0,
        }
    }
}

/// Replica-averaged prediction of one model for one image.
pub fn predict_with_tta(
    predictor: &Predictor,
    image_id: &str,
    img: &RasterImage,
    cfg: &ClassifyConfig,
) -> Result<PredictionVector, PipelineError> {
    if cfg.replicas <= 1 || matches!(predictor.spec().kind, PredictorKind::FileImport { .. }) {
        return Ok(predictor.predict_class(image_id, img)?);
    }
    let seed = derive_seed(cfg.seed, image_id);
    let preds = make_tta_replicas(img, cfg.replicas, cfg.tta_mode, &cfg.augment, seed)
        .iter()
        .map(|r| predictor.predict_class(image_id, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(average_replica_predictions(&preds)?)
}

/// Mean over models of each model's replica-averaged prediction. Images are
/// processed in parallel; the output follows the input order.
pub fn ensemble_classify(
    predictors: &[Predictor],
    images: &[(String, RasterImage)],
    cfg: &ClassifyConfig,
) -> Result<Vec<PredictionVector>, PipelineError> {
    images
        .par_iter()
        .map(|(id, img)| {
            let per_model = predictors
                .iter()
                .map(|p| predict_with_tta(p, id, img, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(mean_ensemble_probs(&per_model)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTrainConfig {
    pub linear: LinearTrainConfig,
    pub augment: AugmentSpec,
    /// Augmented copies per training image, in addition to the original.
    pub train_copies: usize,
    pub seed: u64,
}

impl Default for FoldTrainConfig {
    fn default() -> Self {
        Self {
            linear: LinearTrainConfig::default(),
            augment: AugmentSpec::scenario_j(),
            train_copies: 4,
            seed: 0,
        }
    }
}

/// Colour features of the image and of `copies` augmented versions of it.
pub fn augmented_features(img: &RasterImage, copies: usize, spec: &AugmentSpec, seed: u64) -> Vec<Vec<f64>> {
    std::iter::once(color_features(img))
        .chain((0..copies as u64).map(|i| color_features(&apply_augmentation(img, &sample_augmentation(spec, seed.wrapping_add(i))))))
        .collect()
}

/// One linear-softmax model per fold `1..=n_models`: trained on the fold's
/// training images (with augmented copies), validated on its untouched
/// validation images.
pub fn train_fold_models(
    manifest: &Manifest,
    splits: &Splits,
    images: &HashMap<String, RasterImage>,
    n_models: usize,
    cfg: &FoldTrainConfig,
) -> Result<Vec<(PredictorSpec, TrainingLog)>, PipelineError> {
    if n_models == 0 || n_models > splits.n_folds() {
        return Err(PipelineError::Invalid(format!(
            "asked for {n_models} fold models but the splits have {} folds",
            splits.n_folds()
        )));
    }
    let image = |id: &str| images.get(id).ok_or_else(|| PipelineError::MissingImage(id.to_string()));
    (1..=n_models)
        .map(|k| {
            let train = manifest.select(splits, Role::Train(k))?;
            let val = manifest.select(splits, Role::Val(k))?;
            let mut tx = Vec::new();
            let mut ty = Vec::new();
            let per_image: Vec<(Vec<Vec<f64>>, usize)> = train
                .par_iter()
                .filter_map(|r| r.label.map(|l| (r, l)))
                .map(|(r, l)| {
                    let seed = derive_seed(cfg.seed, &format!("fold{k}/{}", r.image_id));
                    Ok((augmented_features(image(&r.image_id)?, cfg.train_copies, &cfg.augment, seed), l))
                })
                .collect::<Result<_, PipelineError>>()?;
            for (feats, l) in per_image {
                ty.extend(std::iter::repeat_n(l, feats.len()));
                tx.extend(feats);
            }
            let mut vx = Vec::new();
            let mut vy = Vec::new();
            for r in val {
                if let Some(l) = r.label {
                    vx.push(color_features(image(&r.image_id)?));
                    vy.push(l);
                }
            }
            let linear = LinearTrainConfig {
                seed: derive_seed(cfg.seed, &format!("fold{k}")),
                ..cfg.linear
            };
            let (mut spec, log) = train_linear_softmax(&tx, &ty, &vx, &vy, manifest.n_classes(), &linear)?;
            spec.checkpoint = format!("fold{k}/{}", spec.checkpoint);
            Ok((spec, log))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsReport {
    pub n_images: usize,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    /// Row-major `C × C`, rows are true classes.
    pub confusion: Vec<u64>,
}

pub fn evaluate_classification(
    truth: &[usize],
    probs: &[PredictionVector],
    n_classes: usize,
) -> Result<ClsReport, PipelineError> {
    let pred: Vec<usize> = probs.iter().map(PredictionVector::argmax).collect();
    let cm = ConfusionMatrix::from_pairs(n_classes, truth, &pred)?;
    let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
    Ok(ClsReport {
        n_images: truth.len(),
        balanced_accuracy: balanced_accuracy(&cm)?,
        accuracy: correct as f64 / truth.len().max(1) as f64,
        confusion: (0..n_classes)
            .flat_map(|t| (0..n_classes).map(move |p| (t, p)))
            .map(|(t, p)| cm.get(t, p))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn postprocess_orders() {
        // a ring at half resolution: both orders fill it and upsample it
        let ring = BinaryMask::from_fn(8, 8, |r, c| {
            let d = (r as f64 - 3.5).powi(2) + (c as f64 - 3.5).powi(2);
            (4.0..=10.0).contains(&d)
        });
        let p = ring.to_prob();
        for order in [SegOrder::UpsampleFirst, SegOrder::BinarizeFirst] {
            let out = postprocess_segmentation(&[p.clone(), p.clone()], 16, 16, &SegPostprocess { threshold: 0.5, order }).unwrap();
            assert_eq!((out.width(), out.height()), (16, 16));
            assert!(out.get(8, 8), "{order:?} left the centre empty");
            assert!(!out.get(0, 0));
        }
        assert_eq!("binarize_first".parse::<SegOrder>().unwrap(), SegOrder::BinarizeFirst);
        assert!("sideways".parse::<SegOrder>().is_err());
    }

    #[test]
    fn identical_masks_evaluate_to_one() {
        let m = BinaryMask::from_fn(10, 10, |r, c| r > 2 && c < 6);
        let rep = evaluate_segmentation(&[m.clone(), m.clone()], &[m.clone(), m], 0.65).unwrap();
        assert_eq!(rep.mean_threshold_jaccard, 1.0);
    }

    #[test]
    fn tta_with_one_replica_is_plain_prediction() {
        let p = Predictor::new(
            PredictorSpec::new(PredictorKind::LinearSoftmax(crate::backend::LinearSoftmaxParams::zeros(3))),
            Path::new("."),
        )
        .unwrap();
        let img = RasterImage::filled(8, 8, [0.3, 0.4, 0.5]);
        let cfg = ClassifyConfig { replicas: 1, ..Default::default() };
        assert_eq!(predict_with_tta(&p, "a", &img, &cfg).unwrap(), p.predict_class("a", &img).unwrap());
        let many = ClassifyConfig { replicas: 4, ..Default::default() };
        let out = ensemble_classify(&[p.clone(), p], &[("a".into(), img)], &many).unwrap();
        assert!(out[0].is_simplex(1e-12));
    }

    #[test]
    fn classification_report() {
        let probs = vec![
            PredictionVector(vec![0.9, 0.1]),
            PredictionVector(vec![0.2, 0.8]),
            PredictionVector(vec![0.6, 0.4]),
        ];
        let rep = evaluate_classification(&[0, 1, 1], &probs, 2).unwrap();
        assert_eq!(rep.balanced_accuracy, 0.75);
        assert_eq!(rep.confusion, vec![1, 0, 1, 1]);
    }
}
