use std::collections::HashMap;
use std::fs::{self, File};

use anyhow::{bail, Context, Result};
use lesion_core::augment::{apply_augmentation, sample_augmentation, AugmentSpec, TtaMode};
use lesion_core::imgops::io::{read_rgb, write_prob, write_rgb};
use lesion_core::pipeline::{ensemble_classify, train_fold_models, ClassifyConfig, FoldTrainConfig};
use serde_json::json;

use crate::ctx::Ctx;
use crate::files;

fn tta_mode(ctx: &Ctx) -> Result<TtaMode> {
    match ctx.get("mode", "full".to_string())?.as_str() {
        "full" => Ok(TtaMode::FullScenarioJ),
        "flips_color" => Ok(TtaMode::FlipsColorOnly),
        other => bail!("unknown mode `{other}`; expected `full` or `flips_color`"),
    }
}

pub fn augment_preview(ctx: &Ctx) -> Result<()> {
    let image_path = ctx.path("image")?;
    let img = read_rgb(&image_path)?;
    let out = ctx.path("out")?;
    files::create_dir(&out)?;
    let n: usize = ctx.get("n", 8)?;
    let base = ctx.augment_spec(AugmentSpec::scenario_j())?;
    let spec = match tta_mode(ctx)? {
        TtaMode::FullScenarioJ => base,
        TtaMode::FlipsColorOnly => base.flips_color_only(),
    };
    let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let seed = ctx.seed()?;
    let mut sampled = Vec::with_capacity(n);
    for i in 0..n {
        let a = sample_augmentation(&spec, seed.wrapping_add(i as u64));
        write_rgb(&out.join(format!("{stem}_aug{i:02}.png")), &apply_augmentation(&img, &a))?;
        sampled.push(a);
    }
    ctx.sidecar(&out, json!({ "source": image_path, "augmentations": sampled }))?;
    ctx.report(json!({ "output": out, "images": n }));
    Ok(())
}

fn classify(ctx: &Ctx, replicas: usize, mode: TtaMode) -> Result<()> {
    let (m, base) = files::manifest(ctx)?;
    let records = files::selected(ctx, &m)?;
    let items = files::images(&base, &records)?;
    let (predictor, spec_path) = files::predictor(ctx)?;
    let cfg = ClassifyConfig {
        augment: ctx.augment_spec(AugmentSpec::scenario_j())?,
        tta_mode: mode,
        replicas,
        seed: ctx.seed()?,
    };
    let probs = ensemble_classify(std::slice::from_ref(&predictor), &items, &cfg)?;
    let out = ctx.path("out")?;
    let id = files::model_id(ctx, &spec_path)?;
    files::write_outputs(&out, &id, items.into_iter().map(|(i, _)| i).collect(), probs)?;
    ctx.sidecar(&out, json!({ "model": spec_path, "replicas": replicas }))?;
    ctx.report(json!({ "output": out, "model_id": id, "images": records.len(), "replicas": replicas }));
    Ok(())
}

pub fn tta(ctx: &Ctx) -> Result<()> {
    let mode = tta_mode(ctx)?;
    let replicas = ctx.get("replicas", mode.default_replicas())?;
    if replicas == 0 {
        bail!("`--replicas` must be positive");
    }
    classify(ctx, replicas, mode)
}

pub fn predict(ctx: &Ctx) -> Result<()> {
    let Some(masks_out) = ctx.opt::<std::path::PathBuf>("masks_out")? else {
        return classify(ctx, 1, TtaMode::FullScenarioJ);
    };
    let (m, base) = files::manifest(ctx)?;
    let records = files::selected(ctx, &m)?;
    let (predictor, spec_path) = files::predictor(ctx)?;
    files::create_dir(&masks_out)?;
    for (id, img) in files::images(&base, &records)? {
        write_prob(&masks_out.join(format!("{id}.png")), &predictor.predict_mask(&id, &img)?)?;
    }
    ctx.sidecar(&masks_out, json!({ "model": spec_path }))?;
    ctx.report(json!({ "output": masks_out, "images": records.len() }));
    Ok(())
}

pub fn train_baseline(ctx: &Ctx) -> Result<()> {
    let (m, base) = files::manifest(ctx)?;
    let Some(splits) = files::splits(ctx)? else {
        bail!("missing required `--splits`");
    };
    let records: Vec<_> = m.records().iter().filter(|r| r.label.is_some()).collect();
    let images: HashMap<_, _> = files::images(&base, &records)?.into_iter().collect();
    let d = FoldTrainConfig::default();
    let cfg = FoldTrainConfig {
        linear: lesion_core::backend::LinearTrainConfig {
            max_epochs: ctx.get("max_epochs", d.linear.max_epochs)?,
            batch_size: ctx.get("batch_size", d.linear.batch_size)?,
            ..d.linear
        },
        augment: ctx.augment_spec(AugmentSpec::scenario_j())?,
        train_copies: ctx.get("copies", d.train_copies)?,
        seed: ctx.seed()?,
    };
    let n_models = ctx.get("models", splits.n_folds())?;
    let out = ctx.path("out")?;
    files::create_dir(&out)?;
    let trained = train_fold_models(&m, &splits, &images, n_models, &cfg)?;
    let mut summary = Vec::new();
    for (k, (spec, log)) in trained.iter().enumerate() {
        let spec_path = out.join(format!("fold{}.json", k + 1));
        fs::write(&spec_path, spec.to_json()).with_context(|| format!("writing {}", spec_path.display()))?;
        ctx.sidecar(&spec_path, json!({ "fold": k + 1, "labels": m.labels() }))?;
        let log_path = out.join(format!("fold{}_log.csv", k + 1));
        log.write_csv(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?)?;
        let best_val = log.epochs.iter().map(|e| e.val_loss).fold(log.baseline_val_loss, f64::min);
        summary.push(json!({
            "model": spec_path,
            "checkpoint": spec.checkpoint,
            "epochs": log.epochs.len(),
            "best_epoch": log.best_epoch,
            "best_val_loss": best_val,
            "stopped_early": log.stopped_early,
        }));
    }
    ctx.report(json!({ "output": out, "models": summary }));
    Ok(())
}
