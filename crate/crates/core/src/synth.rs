//! Synthetic dermoscopy-like corpus with exact ground truth for all three
//! tasks, plus a noisy superpixel oracle standing in for a patch classifier.
//!
//! Each image is light, mottled "skin" with one dark textured ellipse. The
//! ellipse colour depends on the diagnosis class; every class colour puts
//! mass in a histogram bin no other class uses, so the classes are linearly
//! separable in colour-feature space. Attribute ground truth is a set of
//! non-overlapping disks inside the lesion.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::derive_seed;
use crate::ensemble::{EnsembleError, ModelOutputMatrix};
use crate::imgops::io::{write_mask, write_rgb, PngError};
use crate::pipeline::superpixel_id;
use crate::imgops::{BinaryMask, RasterImage};
use crate::manifest::{ImageRecord, Manifest, ManifestError};
use crate::prediction::PredictionVector;
use crate::superpixel::{
    slic_segment, AttributeClass, AttributeMasks, AttributePrediction, SlicParams, SuperpixelMap, N_ATTRIBUTE_CLASSES,
};

pub const CLASS_NAMES: [&str; 4] = ["nevus", "melanoma", "keratosis", "carcinoma"];

/// Lesion base colours, one per class. The marker channels sit at the
/// centre of an eighth-wide histogram bin so noise never leaves it.
const LESION_RGB: [[f64; 3]; 4] = [
    [0.5625, 0.30, 0.06],
    [0.19, 0.19, 0.4375],
    [0.4375, 0.08, 0.30],
    [0.06, 0.06, 0.06],
];
const SKIN_RGB: [f64; 3] = [0.88, 0.72, 0.64];
/// Class shares before rounding; mildly imbalanced.
const CLASS_SHARE: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub size: usize,
    pub seed: u64,
    /// Images per group (patient); consecutive images share a group.
    pub group_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            size: 96,
            seed: 2018,
            group_size: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image_id: String,
    pub group_id: String,
    pub label: usize,
    pub image: RasterImage,
    pub lesion: BinaryMask,
    pub attributes: AttributeMasks,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub samples: Vec<SynthSample>,
}

pub fn class_labels() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Class of every image: counts proportional to [`CLASS_SHARE`] (each class
/// at least once), shuffled.
fn assign_classes(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut counts: Vec<usize> = CLASS_SHARE.iter().map(|s| ((s * n as f64).round() as usize).max(1)).collect();
    while counts.iter().sum::<usize>() > n && counts[0] > 1 {
        counts[0] -= 1;
    }
    while counts.iter().sum::<usize>() < n {
        counts[0] += 1;
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    labels.truncate(n);
    labels.shuffle(rng);
    labels
}

pub fn generate_corpus(cfg: &SynthConfig) -> SynthCorpus {
    assert!(cfg.size >= 32, "synthetic images need at least 32 px");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = assign_classes(cfg.n_images, &mut rng);
    let group_size = cfg.group_size.max(1);
    let samples = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let (image, lesion, attributes) = draw_image(cfg.size, label, &mut rng);
            SynthSample {
                image_id: format!("SYN_{i:05}"),
                group_id: format!("patient_{:04}", i / group_size),
                label,
                image,
                lesion,
                attributes,
            }
        })
        .collect();
    SynthCorpus { config: *cfg, samples }
}

fn draw_image(size: usize, label: usize, rng: &mut ChaCha8Rng) -> (RasterImage, BinaryMask, AttributeMasks) {
    let s = size as f64;
    let (cy, cx) = (s / 2.0 + rng.random_range(-0.1..0.1) * s, s / 2.0 + rng.random_range(-0.1..0.1) * s);
    let a = rng.random_range(0.21..0.33) * s;
    let b = rng.random_range(0.17..0.29) * s;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let ellipse_r = |r: f64, c: f64| {
        let (dy, dx) = (r - cy, c - cx);
        let u = (dx * cos + dy * sin) / a;
        let v = (-dx * sin + dy * cos) / b;
        (u * u + v * v).sqrt()
    };
    let lesion = BinaryMask::from_fn(size, size, |r, c| ellipse_r(r as f64, c as f64) <= 1.0);

    // attribute disks: distinct classes, inside the lesion, non-overlapping
    let n_attr = [0usize, 1, 1, 2, 2, 3][rng.random_range(0..6)];
    let mut classes: Vec<usize> = (0..5).collect();
    classes.shuffle(rng);
    let mut disks: Vec<(f64, f64, f64, usize)> = Vec::new();
    for &k in classes.iter().take(n_attr) {
        for _ in 0..50 {
            let radius = rng.random_range(11.0..15.0) * s / 96.0;
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rho = rng.random_range(0.0..0.45);
            let (dr, dc) = (rho * b * t.sin(), rho * a * t.cos());
            let (r0, c0) = (cy + dr * cos + dc * sin, cx + dc * cos - dr * sin);
            let clear = disks
                .iter()
                .all(|&(r1, c1, rad1, _)| ((r0 - r1).powi(2) + (c0 - c1).powi(2)).sqrt() > radius + rad1 + 2.0);
            if clear {
                disks.push((r0, c0, radius, k));
                break;
            }
        }
    }
    let attributes: AttributeMasks = std::array::from_fn(|k| {
        BinaryMask::from_fn(size, size, |r, c| {
            disks.iter().any(|&(r0, c0, rad, kk)| {
                kk == k && lesion.get(r, c) && (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2) <= rad * rad
            })
        })
    });

    let phase: [f64; 2] = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let mut img = RasterImage::filled(size, size, SKIN_RGB);
    for r in 0..size {
        for c in 0..size {
            let px = if lesion.get(r, c) {
                let mut base = LESION_RGB[label];
                // attributes shift the lesion texture slightly
                if let Some(k) = (0..5).find(|&k| attributes[k].get(r, c)) {
                    let shift = 0.01 * (k as f64 - 2.0);
                    base = base.map(|v| v + shift);
                }
                base.map(|v| v + rng.random_range(-0.035..0.035))
            } else {
                let mottle = 0.02 * ((r as f64 * 0.21 + phase[0]).sin() + (c as f64 * 0.17 + phase[1]).cos());
                SKIN_RGB.map(|v| v + mottle + rng.random_range(-0.03..0.03))
            };
            img.set_pixel(r, c, px);
        }
    }
    // 8-bit exact, so writing and re-reading the PNG changes nothing
    let img = RasterImage::from_u8(size, size, &img.to_u8()).expect("same dimensions");
    (img, lesion, attributes)
}

impl SynthCorpus {
    pub fn manifest(&self) -> Result<Manifest, ManifestError> {
        let records = self
            .samples
            .iter()
            .map(|s| ImageRecord {
                image_id: s.image_id.clone(),
                path: format!("images/{}.png", s.image_id),
                label: Some(s.label),
                group_id: s.group_id.clone(),
                width: Some(self.config.size as u32),
                height: Some(self.config.size as u32),
            })
            .collect();
        Manifest::new(class_labels(), records)
    }

    pub fn get(&self, image_id: &str) -> Option<&SynthSample> {
        self.samples.iter().find(|s| s.image_id == image_id)
    }

    /// Writes `images/`, `masks/` (`<id>_segmentation.png`), `attributes/`
    /// (challenge-style names) and `manifest.csv` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthWriteError> {
        for sub in ["images", "masks", "attributes"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        self.samples.par_iter().try_for_each(|s| -> Result<(), PngError> {
            write_rgb(&dir.join("images").join(format!("{}.png", s.image_id)), &s.image)?;
            write_mask(&dir.join("masks").join(format!("{}_segmentation.png", s.image_id)), &s.lesion)?;
            for (m, class) in s.attributes.iter().zip(AttributeClass::POSITIVE) {
                write_mask(&dir.join("attributes").join(class.mask_file_name(&s.image_id)), m)?;
            }
            Ok(())
        })?;
        self.manifest()?.write_csv(&dir.join("manifest.csv"))?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthWriteError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Png(#[from] PngError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Per-superpixel ground truth: the attribute covering the majority of the
/// region's pixels, `Absent` otherwise.
pub fn superpixel_truth(sp: &SuperpixelMap, attributes: &AttributeMasks) -> AttributePrediction {
    let mut votes = vec![[0usize; N_ATTRIBUTE_CLASSES]; sp.k()];
    for r in 0..sp.height() {
        for c in 0..sp.width() {
            let k = (0..5).find(|&k| attributes[k].get(r, c)).map_or(0, |k| k + 1);
            votes[sp.label(r, c)][k] += 1;
        }
    }
    let classes = votes
        .iter()
        .enumerate()
        .map(|(region, v)| {
            let positive = (1..N_ATTRIBUTE_CLASSES).max_by_key(|&k| (v[k], std::cmp::Reverse(k))).expect("five classes");
            if 2 * v[positive] > sp.size(region) {
                AttributeClass::ALL[positive]
            } else {
                AttributeClass::Absent
            }
        })
        .collect();
    AttributePrediction::from_classes(classes)
}

/// The true class of each superpixel, except that a `noise` fraction of
/// superpixels is relabeled uniformly among the other five classes. Scores
/// put 0.8 + 0.2/6 on the emitted class and 0.2/6 elsewhere.
pub fn noisy_oracle(truth: &AttributePrediction, noise: f64, seed: u64) -> AttributePrediction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = 0.2 / N_ATTRIBUTE_CLASSES as f64;
    let scores = truth
        .classes
        .iter()
        .map(|&c| {
            let flip = rng.random_bool(noise);
            let other = rng.random_range(1..N_ATTRIBUTE_CLASSES);
            let k = if flip { (c.index() + other) % N_ATTRIBUTE_CLASSES } else { c.index() };
            let mut p = vec![floor; N_ATTRIBUTE_CLASSES];
            p[k] += 0.8;
            PredictionVector(p)
        })
        .collect();
    AttributePrediction::from_scores(scores).expect("six-class scores")
}

/// Noisy-oracle scores for every superpixel of every image, as a one-model
/// output matrix keyed by [`superpixel_id`] (model id `oracle`). Each
/// image's noise is seeded from `seed` and its id.
pub fn oracle_attribute_scores(
    corpus: &SynthCorpus,
    slic: SlicParams,
    noise: f64,
    seed: u64,
) -> Result<ModelOutputMatrix, EnsembleError> {
    let per_image: Vec<(Vec<String>, Vec<PredictionVector>)> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let sp = slic_segment(&s.image, slic).expect("synthetic images are valid SLIC input");
            let truth = superpixel_truth(&sp, &s.attributes);
            let scores = noisy_oracle(&truth, noise, derive_seed(seed, &s.image_id)).scores.expect("oracle scores");
            ((0..sp.k()).map(|r| superpixel_id(&s.image_id, r)).collect(), scores)
        })
        .collect();
    let (ids, scores): (Vec<Vec<String>>, Vec<Vec<PredictionVector>>) = per_image.into_iter().unzip();
    ModelOutputMatrix::from_predictions(vec!["oracle".into()], ids.concat(), &[scores.concat()])
}
