//! Loading manifests, images and model outputs named by the configuration.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesion_core::backend::{Predictor, PredictorSpec};
use lesion_core::ensemble::ModelOutputMatrix;
use lesion_core::imgops::io::read_rgb;
use lesion_core::manifest::{load_manifest, ImageRecord, Manifest, Role, Splits};
use lesion_core::{PredictionVector, RasterImage};

use crate::ctx::Ctx;

/// The manifest and the directory its image paths are relative to.
pub fn manifest(ctx: &Ctx) -> Result<(Manifest, PathBuf)> {
    let path = ctx.path("manifest")?;
    let mut labels = ctx.list("labels");
    if labels.is_empty() {
        let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        labels = Manifest::scan_labels(f)?;
    }
    let m = load_manifest(&path, &labels)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, base))
}

pub fn splits(ctx: &Ctx) -> Result<Option<Splits>> {
    ctx.opt::<PathBuf>("splits")?
        .map(|p| Splits::read_file(&p).map_err(Into::into))
        .transpose()
}

/// Records in the configured role, or all of them without `--role`.
pub fn selected<'m>(ctx: &Ctx, m: &'m Manifest) -> Result<Vec<&'m ImageRecord>> {
    match (ctx.opt::<String>("role")?, splits(ctx)?) {
        (None, _) => Ok(m.records().iter().collect()),
        (Some(_), None) => bail!("`--role` needs `--splits`"),
        (Some(role), Some(s)) => Ok(m.select(&s, role.parse::<Role>()?)?),
    }
}

pub fn images(base: &Path, records: &[&ImageRecord]) -> Result<Vec<(String, RasterImage)>> {
    records
        .iter()
        .map(|r| Ok((r.image_id.clone(), read_rgb(&base.join(&r.path))?)))
        .collect()
}

pub fn predictor(ctx: &Ctx) -> Result<(Predictor, PathBuf)> {
    let path = ctx.path("model")?;
    let spec = PredictorSpec::load(&path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((Predictor::new(spec, &base)?, path))
}

/// `--model-id`, else the spec file's stem.
pub fn model_id(ctx: &Ctx, spec_path: &Path) -> Result<String> {
    Ok(match ctx.opt::<String>("model_id")? {
        Some(id) => id,
        None => spec_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into()),
    })
}

/// All models of all `--inputs` CSVs as one matrix. Every file must cover
/// the same images; rows come out sorted by image id.
pub fn outputs(ctx: &Ctx) -> Result<ModelOutputMatrix> {
    let inputs = ctx.list("inputs");
    if inputs.is_empty() {
        bail!("missing required `--inputs`");
    }
    let mut ids: Option<Vec<String>> = None;
    let mut models = Vec::new();
    let mut preds = Vec::new();
    for input in &inputs {
        let f = File::open(input).with_context(|| format!("opening {input}"))?;
        let m = ModelOutputMatrix::read_csv(BufReader::new(f)).with_context(|| format!("reading {input}"))?;
        let mut order: Vec<usize> = (0..m.rows().len()).collect();
        order.sort_by(|&a, &b| m.rows()[a].image_id.cmp(&m.rows()[b].image_id));
        let these: Vec<String> = order.iter().map(|&i| m.rows()[i].image_id.clone()).collect();
        match &ids {
            None => ids = Some(these),
            Some(prev) if *prev != these => bail!("{input} covers different images than {}", inputs[0]),
            Some(_) => {}
        }
        for id in m.model_ids() {
            if models.contains(id) {
                bail!("model `{id}` appears in more than one input");
            }
            let p = m.model_predictions(id)?;
            preds.push(order.iter().map(|&i| p[i].clone()).collect::<Vec<_>>());
            models.push(id.clone());
        }
    }
    Ok(ModelOutputMatrix::from_predictions(models, ids.unwrap_or_default(), &preds)?)
}

pub fn write_outputs(path: &Path, model_id: &str, ids: Vec<String>, preds: Vec<PredictionVector>) -> Result<()> {
    let m = ModelOutputMatrix::from_predictions(vec![model_id.to_string()], ids, &[preds])?;
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    m.write_csv(f)?;
    Ok(())
}

/// `image_id → label` for the labeled records.
pub fn label_map<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> BTreeMap<String, usize> {
    records
        .into_iter()
        .filter_map(|r| r.label.map(|l| (r.image_id.clone(), l)))
        .collect()
}

/// Sorted `.png` file names in `dir`.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
