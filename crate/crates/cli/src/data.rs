use std::fs::{self, File};

use anyhow::{bail, Context, Result};
use lesion_core::manifest::{class_stats, make_splits, Role, SplitParams};
use lesion_core::superpixel::SlicParams;
use lesion_core::synth::{class_labels, generate_corpus, oracle_attribute_scores, SynthConfig};
use serde_json::{json, Map, Value};

use crate::ctx::Ctx;
use crate::files;

pub fn slic_params(ctx: &Ctx) -> Result<SlicParams> {
    let d = SlicParams::default();
    Ok(SlicParams {
        target_k: ctx.get("slic_k", d.target_k)?,
        compactness: ctx.get("compactness", d.compactness)?,
        iters: ctx.get("slic_iters", d.iters)?,
    })
}

pub fn split(ctx: &Ctx) -> Result<()> {
    let (m, _) = files::manifest(ctx)?;
    let d = SplitParams::default();
    let params = SplitParams {
        seed: ctx.seed()?,
        holdout_frac: ctx.get("holdout_frac", d.holdout_frac)?,
        n_folds: ctx.get("folds", d.n_folds)?,
        val_frac: ctx.get("val_frac", d.val_frac)?,
    };
    let splits = make_splits(&m, params)?;
    let out = ctx.path("out")?;
    splits.write_file(&out, &[("config_hash", ctx.hash().to_string())])?;
    let val_fracs: Vec<f64> = (1..=splits.n_folds()).filter_map(|k| splits.achieved_val_frac(k)).collect();
    ctx.report(json!({
        "output": out,
        "images": m.len(),
        "holdout": splits.holdout().len(),
        "holdout_frac": splits.achieved_holdout_frac(),
        "folds": splits.n_folds(),
        "val_frac": val_fracs,
    }));
    Ok(())
}

pub fn stats(ctx: &Ctx) -> Result<()> {
    let (m, _) = files::manifest(ctx)?;
    let n = m.n_classes();
    let describe = |records: Vec<&lesion_core::manifest::ImageRecord>| {
        let s = class_stats(records, n);
        json!({ "total": s.total(), "counts": s.counts, "frequencies": s.frequencies })
    };
    let mut roles = Map::new();
    if let Some(splits) = files::splits(ctx)? {
        let mut all = vec![Role::Holdout];
        for k in 1..=splits.n_folds() {
            all.extend([Role::Train(k), Role::Val(k)]);
        }
        for role in all {
            roles.insert(role.to_string(), describe(m.select(&splits, role)?));
        }
    }
    ctx.report(json!({
        "labels": m.labels(),
        "all": describe(m.records().iter().collect()),
        "roles": Value::Object(roles),
    }));
    Ok(())
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_images: ctx.get("n", d.n_images)?,
        size: ctx.get("size", d.size)?,
        seed: ctx.seed()?,
        group_size: ctx.get("group_size", d.group_size)?,
    };
    if cfg.size < 32 {
        bail!("`--size` must be at least 32");
    }
    if cfg.n_images == 0 {
        bail!("`--n` must be positive");
    }
    let out = ctx.path("out")?;
    files::create_dir(&out)?;
    let corpus = generate_corpus(&cfg);
    corpus.write_to_dir(&out)?;
    // lets later commands pick up the class order with `--config`
    fs::write(out.join("labels.cfg"), format!("labels={}\n", class_labels().join(",")))
        .context("writing labels.cfg")?;

    let mut report = json!({ "output": out, "images": cfg.n_images, "size": cfg.size, "labels": class_labels() });
    if let Some(scores_path) = ctx.opt::<std::path::PathBuf>("attribute_scores")? {
        let noise: f64 = ctx.get("noise", 0.1)?;
        if !(0.0..=1.0).contains(&noise) {
            bail!("`--noise` must lie in [0, 1]");
        }
        let scores = oracle_attribute_scores(&corpus, slic_params(ctx)?, noise, cfg.seed)?;
        let f = File::create(&scores_path).with_context(|| format!("creating {}", scores_path.display()))?;
        scores.write_csv(f)?;
        ctx.sidecar(&scores_path, json!({ "noise": noise }))?;
        report["attribute_scores"] = json!(scores_path);
        report["superpixels"] = json!(scores.rows().len());
    }
    ctx.sidecar(&out, json!({ "images": cfg.n_images }))?;
    ctx.report(report);
    Ok(())
}
