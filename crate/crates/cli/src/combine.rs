use std::fs;

use anyhow::{bail, Context, Result};
use lesion_core::augment::AugmentSpec;
use lesion_core::ensemble::{fit_stacker, predict_stacker, select_top_models, StackerModel, StackerParams};
use lesion_core::imgops::io::{read_prob, read_rgb, write_mask};
use lesion_core::metrics::{balanced_accuracy, ConfusionMatrix};
use lesion_core::pipeline::{compose_attributes, postprocess_segmentation, AttributeConfig, SegOrder, SegPostprocess};
use lesion_core::superpixel::{AttributeClass, PruneRule};
use serde_json::json;

use crate::ctx::Ctx;
use crate::data::slic_params;
use crate::files;

pub fn ensemble(ctx: &Ctx) -> Result<()> {
    let matrix = files::outputs(ctx)?;
    let mut chosen = ctx.list("models");
    if chosen.is_empty() {
        chosen = matrix.model_ids().to_vec();
    }
    if let Some(k) = ctx.opt::<usize>("top")? {
        // rank on the labeled selected images
        let (m, _) = files::manifest(ctx)?;
        let labels = files::label_map(files::selected(ctx, &m)?);
        let rows: Vec<usize> = (0..matrix.rows().len())
            .filter(|&i| labels.contains_key(&matrix.rows()[i].image_id))
            .collect();
        if rows.is_empty() {
            bail!("no labeled images to rank models on");
        }
        let truth: Vec<usize> = rows.iter().map(|&i| labels[&matrix.rows()[i].image_id]).collect();
        let mut scores = Vec::new();
        for id in &chosen {
            let preds = matrix.model_predictions(id)?;
            let pred: Vec<usize> = rows.iter().map(|&i| preds[i].argmax()).collect();
            let cm = ConfusionMatrix::from_pairs(m.n_classes(), &truth, &pred)?;
            scores.push((id.clone(), balanced_accuracy(&cm)?));
        }
        chosen = select_top_models(&scores, k);
    }
    let mean = matrix.mean_over(&chosen)?;
    let out = ctx.path("out")?;
    let ids = matrix.rows().iter().map(|r| r.image_id.clone()).collect();
    files::write_outputs(&out, "ensemble", ids, mean)?;
    ctx.sidecar(&out, json!({ "models": chosen }))?;
    ctx.report(json!({ "output": out, "models": chosen, "images": matrix.rows().len() }));
    Ok(())
}

pub fn stack_fit(ctx: &Ctx) -> Result<()> {
    let (m, _) = files::manifest(ctx)?;
    let labels = files::label_map(files::selected(ctx, &m)?);
    let matrix = files::outputs(ctx)?.with_labels(&labels.into_iter().collect())?;
    let (x, y) = matrix.training_set();
    if x.is_empty() {
        bail!("none of the input images are labeled in the selection");
    }
    let d = StackerParams::default();
    let params = StackerParams {
        rounds: ctx.get("rounds", d.rounds)?,
        depth: ctx.get("depth", d.depth)?,
        shrinkage: ctx.get("shrinkage", d.shrinkage)?,
        seed: ctx.seed()?,
    };
    let fit = fit_stacker(&x, &y, matrix.n_classes(), params)?;
    let out = ctx.path("out")?;
    fs::write(&out, fit.model.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    ctx.sidecar(&out, json!({ "models": matrix.model_ids(), "loss_history": fit.loss_history }))?;
    ctx.report(json!({
        "output": out,
        "rows": x.len(),
        "rounds": params.rounds,
        "initial_loss": fit.loss_history.first(),
        "final_loss": fit.loss_history.last(),
    }));
    Ok(())
}

pub fn stack_predict(ctx: &Ctx) -> Result<()> {
    let model_path = ctx.path("model")?;
    let text = fs::read_to_string(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let model = StackerModel::from_json(&text)?;
    let matrix = files::outputs(ctx)?;
    let probs = predict_stacker(&model, &matrix)?;
    let out = ctx.path("out")?;
    let ids = matrix.rows().iter().map(|r| r.image_id.clone()).collect();
    files::write_outputs(&out, "stacker", ids, probs)?;
    ctx.sidecar(&out, json!({ "model": model_path }))?;
    ctx.report(json!({ "output": out, "images": matrix.rows().len() }));
    Ok(())
}

pub fn postprocess_seg(ctx: &Ctx) -> Result<()> {
    let dirs = ctx.list("masks");
    if dirs.is_empty() {
        bail!("missing required `--masks`");
    }
    let order = match ctx.opt::<String>("order")? {
        Some(o) => o.parse::<SegOrder>().map_err(anyhow::Error::msg)?,
        None => SegOrder::default(),
    };
    let cfg = SegPostprocess {
        threshold: ctx.get("threshold", 0.5)?,
        order,
    };
    if !(0.0..=1.0).contains(&cfg.threshold) {
        bail!("`--threshold` must lie in [0, 1]");
    }
    let (m, base) = files::manifest(ctx)?;
    let records = files::selected(ctx, &m)?;
    let out = ctx.path("out")?;
    files::create_dir(&out)?;
    for r in &records {
        let img = read_rgb(&base.join(&r.path))?;
        let masks = dirs
            .iter()
            .map(|d| read_prob(&std::path::Path::new(d).join(format!("{}.png", r.image_id))))
            .collect::<Result<Vec<_>, _>>()?;
        let seg = postprocess_segmentation(&masks, img.width(), img.height(), &cfg)?;
        write_mask(&out.join(format!("{}_segmentation.png", r.image_id)), &seg)?;
    }
    ctx.sidecar(&out, json!({ "inputs": dirs, "threshold": cfg.threshold, "order": format!("{order:?}") }))?;
    ctx.report(json!({ "output": out, "images": records.len(), "models": dirs.len() }));
    Ok(())
}

pub fn compose_attr(ctx: &Ctx) -> Result<()> {
    let (m, base) = files::manifest(ctx)?;
    let records = files::selected(ctx, &m)?;
    let items = files::images(&base, &records)?;
    let (predictor, spec_path) = files::predictor(ctx)?;
    let d = AttributeConfig::default();
    let prune = if ctx.get("prune", true)? {
        Some(PruneRule::MinCount(ctx.get("min_count", 30)?))
    } else {
        None
    };
    let cfg = AttributeConfig {
        slic: slic_params(ctx)?,
        patch_size: ctx.get("patch_size", d.patch_size)?,
        replicas: ctx.get("replicas", d.replicas)?,
        augment: ctx.augment_spec(AugmentSpec::scenario_j())?,
        prune,
        seed: ctx.seed()?,
    };
    let out = ctx.path("out")?;
    files::create_dir(&out)?;
    let results = compose_attributes(&predictor, &items, &cfg)?;
    let mut positives = 0;
    for ((id, _), (pred, masks)) in items.iter().zip(&results) {
        positives += AttributeClass::POSITIVE.iter().map(|&c| pred.count(c)).sum::<usize>();
        for (mask, class) in masks.iter().zip(AttributeClass::POSITIVE) {
            write_mask(&out.join(class.mask_file_name(id)), mask)?;
        }
    }
    ctx.sidecar(&out, json!({ "model": spec_path, "prune": format!("{prune:?}") }))?;
    ctx.report(json!({ "output": out, "images": items.len(), "positive_superpixels": positives }));
    Ok(())
}
