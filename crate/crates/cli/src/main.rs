//! `lesion` — command-line front end for the segmentation, attribute and
//! diagnosis pipelines.
//!
//! Every subcommand prints one JSON report line on stdout and exits 0. Bad
//! input of any kind (unknown flags, invalid values, missing files) exits 2
//! with a JSON `{"error": ...}` line on stderr.

mod combine;
mod ctx;
mod data;
mod eval;
mod files;
mod models;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::ctx::Ctx;

#[derive(Parser)]
#[command(name = "lesion", version, about = "Skin-lesion segmentation, attribute and diagnosis pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Flat `key=value` configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; every random draw in the run derives from it.
    #[arg(long)]
    seed: Option<u64>,
}

/// Which images a command operates on.
#[derive(Args)]
struct Selection {
    /// Manifest CSV with header `image_id,path,label,group_id`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Class names in index order, comma-separated. Scanned (sorted) from
    /// the manifest when omitted.
    #[arg(long)]
    labels: Option<String>,
    /// Split file; with `--role`, restricts the command to one partition.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// `holdout`, `train_<k>` or `val_<k>`.
    #[arg(long)]
    role: Option<String>,
}

/// SLIC and superpixel-patch settings.
#[derive(Args)]
struct SuperpixelOpts {
    /// Target number of superpixels per image.
    #[arg(long)]
    slic_k: Option<usize>,
    #[arg(long)]
    compactness: Option<f64>,
    #[arg(long)]
    slic_iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Group-aware holdout and k-fold train/validation splits.
    Split {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        /// Output split file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        holdout_frac: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        val_frac: Option<f64>,
    },
    /// Class counts and frequencies, per split role when splits are given.
    Stats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
    },
    /// Writes a synthetic corpus with ground truth for all three tasks.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sp: SuperpixelOpts,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of images.
        #[arg(long)]
        n: Option<usize>,
        /// Image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Images per patient group.
        #[arg(long)]
        group_size: Option<usize>,
        /// Also write noisy-oracle superpixel scores to this CSV.
        #[arg(long)]
        attribute_scores: Option<PathBuf>,
        /// Fraction of superpixels the oracle relabels.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Writes augmented versions of one image with their sampled parameters.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of augmented versions.
        #[arg(long)]
        n: Option<usize>,
        /// `full` (crop, flips, rotation, shear, scale, colour) or `flips_color`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Replica-averaged class predictions of one model.
    Tta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        /// Predictor spec JSON.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Model id written to the output CSV; the spec file stem by default.
        #[arg(long)]
        model_id: Option<String>,
        /// Output predictions CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replicas per image; 128 for `full`, 16 for `flips_color` by default.
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Trains one linear-softmax baseline per fold.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        /// Output directory for `fold<k>.json` specs and training logs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of fold models; all folds by default.
        #[arg(long)]
        models: Option<usize>,
        /// Augmented copies per training image.
        #[arg(long)]
        copies: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Single-pass predictions: class CSV (`--out`) or probability masks
    /// (`--masks-out`).
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for 16-bit `<image_id>.png` probability masks.
        #[arg(long)]
        masks_out: Option<PathBuf>,
    },
    /// Mean ensemble of model output CSVs.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        /// Model output CSVs (`image_id,model_id,p_0,...`).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        /// Models to average; all by default.
        #[arg(long)]
        models: Option<String>,
        /// Keep only the k models with the best balanced accuracy on the
        /// selected labeled images.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Boosted-tree stacker over model outputs.
    Stack {
        #[command(subcommand)]
        action: StackAction,
    },
    /// Combines per-model probability masks into one hole-filled binary
    /// mask at image size.
    PostprocessSeg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        /// Directories of `<image_id>.png` probability masks, one per model.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        masks: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// `upsample_first` (default) or `binarize_first`.
        #[arg(long)]
        order: Option<String>,
    },
    /// Superpixel classification → attribute masks → sparse-positive pruning.
    ComposeAttr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        #[command(flatten)]
        sp: SuperpixelOpts,
        /// Six-class superpixel predictor spec JSON.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Attributes on fewer superpixels than this are dropped.
        #[arg(long)]
        min_count: Option<usize>,
        /// Disable pruning.
        #[arg(long)]
        no_prune: bool,
        /// Flip/colour replicas per superpixel patch.
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Mean (threshold) Jaccard of predicted against reference lesion masks.
    EvalSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Jaccard values below this count as zero.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Mean attribute Jaccard over the five attribute classes.
    EvalAttr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// `pooled` (default) or `per_image`.
        #[arg(long)]
        pooling: Option<String>,
    },
    /// Balanced accuracy of class predictions.
    EvalCls {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        /// Model to score; the mean over all models by default.
        #[arg(long)]
        model_id: Option<String>,
    },
}

#[derive(Subcommand)]
enum StackAction {
    /// Fits the stacker on labeled model outputs.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        /// Output model JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        shrinkage: Option<f64>,
    },
    /// Applies a fitted stacker.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn paths(v: &[PathBuf]) -> Option<String> {
    (!v.is_empty()).then(|| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","))
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

type Flags = Vec<(&'static str, Option<String>)>;

impl Common {
    fn ctx(&self, command: &'static str, mut flags: Flags) -> Result<Ctx> {
        flags.push(("seed", text(&self.seed)));
        Ctx::new(command, self.config.as_deref(), flags)
    }
}

impl Selection {
    fn flags(&self) -> Flags {
        vec![
            ("manifest", path(&self.manifest)),
            ("labels", self.labels.clone()),
            ("splits", path(&self.splits)),
            ("role", self.role.clone()),
        ]
    }
}

impl SuperpixelOpts {
    fn flags(&self) -> Flags {
        vec![
            ("slic_k", text(&self.slic_k)),
            ("compactness", text(&self.compactness)),
            ("slic_iters", text(&self.slic_iters)),
        ]
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { common, sel, out, holdout_frac, folds, val_frac } => {
            let mut f = sel.flags();
            f.extend([
                ("out", path(&out)),
                ("holdout_frac", text(&holdout_frac)),
                ("folds", text(&folds)),
                ("val_frac", text(&val_frac)),
            ]);
            data::split(&common.ctx("split", f)?)
        }
        Command::Stats { common, sel } => data::stats(&common.ctx("stats", sel.flags())?),
        Command::Synth { common, sp, out, n, size, group_size, attribute_scores, noise } => {
            let mut f = sp.flags();
            f.extend([
                ("out", path(&out)),
                ("n", text(&n)),
                ("size", text(&size)),
                ("group_size", text(&group_size)),
                ("attribute_scores", path(&attribute_scores)),
                ("noise", text(&noise)),
            ]);
            data::synth(&common.ctx("synth", f)?)
        }
        Command::AugmentPreview { common, image, out, n, mode } => {
            let f = vec![("image", path(&image)), ("out", path(&out)), ("n", text(&n)), ("mode", mode)];
            models::augment_preview(&common.ctx("augment-preview", f)?)
        }
        Command::Tta { common, sel, model, model_id, out, replicas, mode } => {
            let mut f = sel.flags();
            f.extend([
                ("model", path(&model)),
                ("model_id", model_id),
                ("out", path(&out)),
                ("replicas", text(&replicas)),
                ("mode", mode),
            ]);
            models::tta(&common.ctx("tta", f)?)
        }
        Command::TrainBaseline { common, sel, out, models: n, copies, max_epochs, batch_size } => {
            let mut f = sel.flags();
            f.extend([
                ("out", path(&out)),
                ("models", text(&n)),
                ("copies", text(&copies)),
                ("max_epochs", text(&max_epochs)),
                ("batch_size", text(&batch_size)),
            ]);
            models::train_baseline(&common.ctx("train-baseline", f)?)
        }
        Command::Predict { common, sel, model, model_id, out, masks_out } => {
            let mut f = sel.flags();
            f.extend([
                ("model", path(&model)),
                ("model_id", model_id),
                ("out", path(&out)),
                ("masks_out", path(&masks_out)),
            ]);
            models::predict(&common.ctx("predict", f)?)
        }
        Command::Ensemble { common, sel, inputs, models: m, top, out } => {
            let mut f = sel.flags();
            f.extend([("inputs", paths(&inputs)), ("models", m), ("top", text(&top)), ("out", path(&out))]);
            combine::ensemble(&common.ctx("ensemble", f)?)
        }
        Command::Stack { action: StackAction::Fit { common, sel, inputs, out, rounds, depth, shrinkage } } => {
            let mut f = sel.flags();
            f.extend([
                ("inputs", paths(&inputs)),
                ("out", path(&out)),
                ("rounds", text(&rounds)),
                ("depth", text(&depth)),
                ("shrinkage", text(&shrinkage)),
            ]);
            combine::stack_fit(&common.ctx("stack-fit", f)?)
        }
        Command::Stack { action: StackAction::Predict { common, model, inputs, out } } => {
            let f = vec![("model", path(&model)), ("inputs", paths(&inputs)), ("out", path(&out))];
            combine::stack_predict(&common.ctx("stack-predict", f)?)
        }
        Command::PostprocessSeg { common, sel, masks, out, threshold, order } => {
            let mut f = sel.flags();
            f.extend([
                ("masks", paths(&masks)),
                ("out", path(&out)),
                ("threshold", text(&threshold)),
                ("order", order),
            ]);
            combine::postprocess_seg(&common.ctx("postprocess-seg", f)?)
        }
        Command::ComposeAttr { common, sel, sp, model, out, min_count, no_prune, replicas, patch_size } => {
            let mut f = sel.flags();
            f.extend(sp.flags());
            f.extend([
                ("model", path(&model)),
                ("out", path(&out)),
                ("min_count", text(&min_count)),
                ("prune", no_prune.then(|| "false".to_string())),
                ("replicas", text(&replicas)),
                ("patch_size", text(&patch_size)),
            ]);
            combine::compose_attr(&common.ctx("compose-attr", f)?)
        }
        Command::EvalSeg { common, pred, gt, tau } => {
            let f = vec![("pred", path(&pred)), ("gt", path(&gt)), ("tau", text(&tau))];
            eval::eval_seg(&common.ctx("eval-seg", f)?)
        }
        Command::EvalAttr { common, pred, gt, pooling } => {
            let f = vec![("pred", path(&pred)), ("gt", path(&gt)), ("pooling", pooling)];
            eval::eval_attr(&common.ctx("eval-attr", f)?)
        }
        Command::EvalCls { common, sel, inputs, model_id } => {
            let mut f = sel.flags();
            f.extend([("inputs", paths(&inputs)), ("model_id", model_id)]);
            eval::eval_cls(&common.ctx("eval-cls", f)?)
        }
    }
}

fn main() -> ExitCode {
    // clap prints usage and exits 2 on unknown flags or subcommands
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors often repeat their source's text; keep each once
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("{}", json!({ "error": msg }));
            ExitCode::from(2)
        }
    }
}
