use anyhow::{bail, Result};
use lesion_core::imgops::io::read_mask;
use lesion_core::metrics::{attribute_score, AttributePooling};
use lesion_core::pipeline::{evaluate_classification, evaluate_segmentation};
use lesion_core::superpixel::{AttributeClass, AttributeMasks};
use serde_json::json;

use crate::ctx::Ctx;
use crate::files;

/// Pairs every `.png` in the reference directory with the same-named file
/// in the prediction directory.
pub fn eval_seg(ctx: &Ctx) -> Result<()> {
    let (pred_dir, gt_dir) = (ctx.path("pred")?, ctx.path("gt")?);
    let tau: f64 = ctx.get("tau", 0.65)?;
    if !(0.0..=1.0).contains(&tau) {
        bail!("`--tau` must lie in [0, 1]");
    }
    let names = files::png_names(&gt_dir)?;
    if names.is_empty() {
        bail!("no .png masks in {}", gt_dir.display());
    }
    let mut pred = Vec::with_capacity(names.len());
    let mut gt = Vec::with_capacity(names.len());
    for name in &names {
        gt.push(read_mask(&gt_dir.join(name))?);
        pred.push(read_mask(&pred_dir.join(name))?);
    }
    let r = evaluate_segmentation(&pred, &gt, tau)?;
    ctx.report(json!({
        "images": r.n_images,
        "tau": tau,
        "mean_threshold_jaccard": r.mean_threshold_jaccard,
        "mean_jaccard": r.mean_jaccard,
    }));
    Ok(())
}

fn attribute_set(dir: &std::path::Path, id: &str) -> Result<AttributeMasks> {
    let masks = AttributeClass::POSITIVE
        .iter()
        .map(|c| read_mask(&dir.join(c.mask_file_name(id))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(masks.try_into().expect("five positive classes"))
}

/// Images are the ids with a first-attribute mask in the reference directory.
pub fn eval_attr(ctx: &Ctx) -> Result<()> {
    let (pred_dir, gt_dir) = (ctx.path("pred")?, ctx.path("gt")?);
    let pooling = match ctx.get("pooling", "pooled".to_string())?.as_str() {
        "pooled" => AttributePooling::Pooled,
        "per_image" => AttributePooling::PerImage,
        other => bail!("unknown pooling `{other}`; expected `pooled` or `per_image`"),
    };
    let suffix = AttributeClass::POSITIVE[0].mask_file_name("");
    let ids: Vec<String> = files::png_names(&gt_dir)?
        .into_iter()
        .filter_map(|n| n.strip_suffix(&suffix).map(str::to_string))
        .collect();
    if ids.is_empty() {
        bail!("no attribute masks in {}", gt_dir.display());
    }
    let mut pred = Vec::with_capacity(ids.len());
    let mut gt = Vec::with_capacity(ids.len());
    for id in &ids {
        gt.push(attribute_set(&gt_dir, id)?);
        pred.push(attribute_set(&pred_dir, id)?);
    }
    let score = attribute_score(&pred, &gt, pooling)?;
    ctx.report(json!({ "images": ids.len(), "pooling": pooling, "attribute_jaccard": score }));
    Ok(())
}

/// Scores the labeled selected images; each must have a prediction.
pub fn eval_cls(ctx: &Ctx) -> Result<()> {
    let (m, _) = files::manifest(ctx)?;
    let labels = files::label_map(files::selected(ctx, &m)?);
    let matrix = files::outputs(ctx)?;
    if matrix.n_classes() != m.n_classes() {
        bail!("predictions have {} classes but the manifest has {}", matrix.n_classes(), m.n_classes());
    }
    let model = ctx.opt::<String>("model_id")?;
    let preds = match &model {
        Some(id) => matrix.model_predictions(id)?,
        None => matrix.mean_over(matrix.model_ids())?,
    };
    let by_id: std::collections::HashMap<&str, _> =
        matrix.rows().iter().map(|r| r.image_id.as_str()).zip(preds).collect();
    let mut truth = Vec::with_capacity(labels.len());
    let mut probs = Vec::with_capacity(labels.len());
    for (id, &label) in &labels {
        match by_id.get(id.as_str()) {
            Some(p) => probs.push(p.clone()),
            None => bail!("no prediction for image `{id}`"),
        }
        truth.push(label);
    }
    if truth.is_empty() {
        bail!("no labeled images in the selection");
    }
    let r = evaluate_classification(&truth, &probs, m.n_classes())?;
    ctx.report(json!({
        "images": r.n_images,
        "model": model.unwrap_or_else(|| "mean".into()),
        "balanced_accuracy": r.balanced_accuracy,
        "accuracy": r.accuracy,
        "confusion": r.confusion,
    }));
    Ok(())
}
