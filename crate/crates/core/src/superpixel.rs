//! Superpixels and the per-superpixel attribute workflow: SLIC
//! segmentation, centred patch extraction, mask composition and pruning of
//! sparse positive classes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::reflect;
use crate::imgops::{BinaryMask, RasterImage};
use crate::prediction::PredictionVector;

#[derive(Debug, Error, PartialEq)]
pub enum SuperpixelError {
    #[error("region {region} out of range for {k} superpixels")]
    BadRegion { region: usize, k: usize },
    #[error("prediction covers {got} superpixels, map has {k}")]
    LengthMismatch { k: usize, got: usize },
    #[error("label map has {got} entries for a {width}x{height} image")]
    BadLabelMap { width: usize, height: usize, got: usize },
    #[error("region {0} has no pixels")]
    EmptyRegion(usize),
    #[error("mask shape does not match the superpixel map")]
    ShapeMismatch,
    #[error("superpixel {0} is marked in more than one attribute mask or only partially")]
    Inconsistent(usize),
    #[error("score-based pruning needs per-superpixel scores")]
    MissingScores,
    #[error("score vector for superpixel {0} must have 6 entries")]
    BadScores(usize),
    #[error("target_k must be at least 1")]
    BadTarget,
}

/// The six per-superpixel outcomes; `Absent` is index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeClass {
    Absent,
    PigmentNetwork,
    NegativeNetwork,
    Streaks,
    MiliaLikeCyst,
    Globules,
}

pub const N_ATTRIBUTE_CLASSES: usize = 6;

impl AttributeClass {
    pub const ALL: [AttributeClass; N_ATTRIBUTE_CLASSES] = [
        AttributeClass::Absent,
        AttributeClass::PigmentNetwork,
        AttributeClass::NegativeNetwork,
        AttributeClass::Streaks,
        AttributeClass::MiliaLikeCyst,
        AttributeClass::Globules,
    ];

    /// The five attributes that get a mask.
    pub const POSITIVE: [AttributeClass; 5] = [
        AttributeClass::PigmentNetwork,
        AttributeClass::NegativeNetwork,
        AttributeClass::Streaks,
        AttributeClass::MiliaLikeCyst,
        AttributeClass::Globules,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeClass::Absent => "absent",
            AttributeClass::PigmentNetwork => "pigment_network",
            AttributeClass::NegativeNetwork => "negative_network",
            AttributeClass::Streaks => "streaks",
            AttributeClass::MiliaLikeCyst => "milia_like_cyst",
            AttributeClass::Globules => "globules",
        }
    }

    /// Challenge file name of the mask for this attribute.
    pub fn mask_file_name(self, image_id: &str) -> String {
        format!("{image_id}_attribute_{}.png", self.name())
    }
}

/// Per-pixel region labels with per-region centroids `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    centroids: Vec<(f64, f64)>,
    sizes: Vec<usize>,
}

impl SuperpixelMap {
    /// Builds a map from raw labels, which must use every index in `0..K`.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self, SuperpixelError> {
        if width * height != labels.len() || labels.is_empty() {
            return Err(SuperpixelError::BadLabelMap {
                width,
                height,
                got: labels.len(),
            });
        }
        let k = *labels.iter().max().expect("non-empty") as usize + 1;
        let mut sums = vec![(0.0, 0.0); k];
        let mut sizes = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            sums[l].0 += (i / width) as f64;
            sums[l].1 += (i % width) as f64;
            sizes[l] += 1;
        }
        if let Some(r) = sizes.iter().position(|&s| s == 0) {
            return Err(SuperpixelError::EmptyRegion(r));
        }
        let centroids = sums
            .iter()
            .zip(&sizes)
            .map(|(&(r, c), &n)| (r / n as f64, c / n as f64))
            .collect();
        Ok(Self {
            width,
            height,
            labels,
            centroids,
            sizes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    pub fn centroid(&self, region: usize) -> (f64, f64) {
        self.centroids[region]
    }

    pub fn size(&self, region: usize) -> usize {
        self.sizes[region]
    }

    /// True when every region is a single 4-connected component.
    pub fn regions_connected(&self) -> bool {
        let mut seen = vec![false; self.labels.len()];
        let mut components = vec![0usize; self.k()];
        for start in 0..self.labels.len() {
            if seen[start] {
                continue;
            }
            let l = self.labels[start];
            components[l as usize] += 1;
            flood(self.width, self.height, start, &mut seen, |j| self.labels[j] == l, |_| {});
        }
        components.iter().all(|&c| c == 1)
    }
}

/// Breadth-first 4-connected flood from `start`; marks `seen` and calls
/// `visit` for every pixel accepted by `same`.
fn flood(
    w: usize,
    h: usize,
    start: usize,
    seen: &mut [bool],
    same: impl Fn(usize) -> bool,
    mut visit: impl FnMut(usize),
) {
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        visit(i);
        let (r, c) = (i / w, i % w);
        let mut push = |j: usize| {
            if !seen[j] && same(j) {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            push(i - w);
        }
        if r + 1 < h {
            push(i + w);
        }
        if c > 0 {
            push(i - 1);
        }
        if c + 1 < w {
            push(i + 1);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub target_k: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            target_k: 1000,
            compactness: 10.0,
            iters: 10,
        }
    }
}

fn srgb_to_lab([r, g, b]: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(r), lin(g), lin(b));
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    const D: f64 = 6.0 / 29.0;
    let f = |t: f64| if t > D * D * D { t.cbrt() } else { t / (3.0 * D * D) + 4.0 / 29.0 };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// SLIC in CIELAB with a final connectivity pass: the largest piece of each
/// cluster keeps its region and every stray fragment joins a neighbour.
/// Deterministic; no randomness is involved.
pub fn slic_segment(img: &RasterImage, params: SlicParams) -> Result<SuperpixelMap, SuperpixelError> {
    if params.target_k == 0 {
        return Err(SuperpixelError::BadTarget);
    }
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let single = || SuperpixelMap::from_labels(w, h, vec![0; n]);
    if params.target_k == 1 {
        return single();
    }
    let s = (n as f64 / params.target_k as f64).sqrt();
    let nx = ((w as f64 / s).round() as usize).max(1);
    let ny = ((h as f64 / s).round() as usize).max(1);
    if nx * ny <= 1 {
        return single();
    }

    let lab: Vec<[f64; 3]> = (0..n).map(|i| srgb_to_lab(img.pixel(i / w, i % w))).collect();
    let grad = |x: usize, y: usize| -> f64 {
        let at = |xx: usize, yy: usize| lab[yy * w + xx];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let d = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        d(at(xr, y), at(xl, y)) + d(at(x, yd), at(x, yu))
    };

    // centres: [L, a, b, x, y]
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let y = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let (mut bx, mut by, mut bg) = (x, y, grad(x, y));
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let g = grad(xx, yy);
                    if g < bg {
                        (bx, by, bg) = (xx, yy, g);
                    }
                }
            }
            let c = lab[by * w + bx];
            centers.push([c[0], c[1], c[2], bx as f64, by as f64]);
        }
    }

    let step = (w as f64 / nx as f64).max(h as f64 / ny as f64);
    let spatial = (params.compactness / step).powi(2);
    let mut labels = vec![u32::MAX; n];
    for _ in 0..params.iters.max(1) {
        let mut dist = vec![f64::INFINITY; n];
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c[3] - step).floor().max(0.0) as usize;
            let x1 = ((c[3] + step).ceil() as usize).min(w - 1);
            let y0 = (c[4] - step).floor().max(0.0) as usize;
            let y1 = ((c[4] + step).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let p = lab[i];
                    let dc = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    let ds = (x as f64 - c[3]).powi(2) + (y as f64 - c[4]).powi(2);
                    let d = dc + ds * spatial;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        // any pixel outside every window goes to the spatially nearest centre
        for i in 0..n {
            if labels[i] == u32::MAX {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let k = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da = (x - centers[a][3]).powi(2) + (y - centers[a][4]).powi(2);
                        let db = (x - centers[b][3]).powi(2) + (y - centers[b][4]).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least two centres");
                labels[i] = k as u32;
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for i in 0..n {
            let acc = &mut sums[labels[i] as usize];
            let p = lab[i];
            acc[0] += p[0];
            acc[1] += p[1];
            acc[2] += p[2];
            acc[3] += (i % w) as f64;
            acc[4] += (i / w) as f64;
            acc[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for k in 0..5 {
                    c[k] = s[k] / s[5];
                }
            }
        }
    }

    let relabeled = enforce_connectivity(w, h, &labels);
    SuperpixelMap::from_labels(w, h, relabeled)
}

fn enforce_connectivity(w: usize, h: usize, labels: &[u32]) -> Vec<u32> {
    let n = labels.len();
    // 4-connected components of equal label, numbered in raster order
    let mut comp = vec![usize::MAX; n];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let l = labels[start];
        let id = comp_label.len();
        let mut size = 0;
        flood(w, h, start, &mut seen, |j| labels[j] == l, |i| {
            comp[i] = id;
            size += 1;
        });
        comp_label.push(l);
        comp_size.push(size);
    }
    // the largest component of each label keeps it (first one on ties)
    let n_labels = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut keeper = vec![usize::MAX; n_labels];
    for (id, (&l, &size)) in comp_label.iter().zip(&comp_size).enumerate() {
        let k = &mut keeper[l as usize];
        if *k == usize::MAX || comp_size[*k] < size {
            *k = id;
        }
    }
    let mut next = 0u32;
    let mut resolved: Vec<Option<u32>> = vec![None; comp_label.len()];
    for (id, &l) in comp_label.iter().enumerate() {
        if keeper[l as usize] == id {
            resolved[id] = Some(next);
            next += 1;
        }
    }
    // orphan fragments join the first resolved neighbour met in raster
    // order; repeat until fragments surrounded only by fragments are done
    loop {
        let mut pending = false;
        let mut progress = false;
        for i in 0..n {
            let id = comp[i];
            if resolved[id].is_some() {
                continue;
            }
            let (r, c) = (i / w, i % w);
            let neighbours = [
                (r > 0).then(|| i - w),
                (c > 0).then(|| i - 1),
                (c + 1 < w).then(|| i + 1),
                (r + 1 < h).then(|| i + w),
            ];
            match neighbours.into_iter().flatten().find_map(|j| resolved[comp[j]]) {
                Some(t) => {
                    resolved[id] = Some(t);
                    progress = true;
                }
                None => pending = true,
            }
        }
        if !pending || !progress {
            break;
        }
    }
    let relabeled: Vec<u32> = comp.iter().map(|&id| resolved[id].unwrap_or(0)).collect();
    // renumber in raster order of first appearance
    let mut order = vec![u32::MAX; next as usize];
    let mut k = 0u32;
    relabeled
        .iter()
        .map(|&l| {
            let o = &mut order[l as usize];
            if *o == u32::MAX {
                *o = k;
                k += 1;
            }
            *o
        })
        .collect()
}

/// Round half down: 2.5 → 2, 2.51 → 3.
fn round_half_down(v: f64) -> i64 {
    (v - 0.5).ceil() as i64
}

/// `size × size` patch whose centre pixel `(size/2, size/2)` sits on the
/// region centroid. Pixels beyond the border are symmetric reflections.
pub fn extract_patch(
    img: &RasterImage,
    sp: &SuperpixelMap,
    region: usize,
    size: usize,
) -> Result<RasterImage, SuperpixelError> {
    if region >= sp.k() {
        return Err(SuperpixelError::BadRegion { region, k: sp.k() });
    }
    let (cr, cc) = sp.centroid(region);
    let (cr, cc) = (round_half_down(cr), round_half_down(cc));
    let half = (size / 2) as i64;
    let mut patch = RasterImage::filled(size, size, [0.0; 3]);
    for i in 0..size {
        let sr = reflect(cr - half + i as i64, img.height());
        for j in 0..size {
            let sc = reflect(cc - half + j as i64, img.width());
            patch.set_pixel(i, j, img.pixel(sr, sc));
        }
    }
    Ok(patch)
}

/// One class per superpixel, with the optional score vectors it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePrediction {
    pub classes: Vec<AttributeClass>,
    pub scores: Option<Vec<PredictionVector>>,
}

impl AttributePrediction {
    pub fn from_classes(classes: Vec<AttributeClass>) -> Self {
        Self { classes, scores: None }
    }

    /// Highest score wins; ties go to the lower index, so `Absent` wins any
    /// tie it is part of.
    pub fn from_scores(scores: Vec<PredictionVector>) -> Result<Self, SuperpixelError> {
        let mut classes = Vec::with_capacity(scores.len());
        for (i, s) in scores.iter().enumerate() {
            if s.len() != N_ATTRIBUTE_CLASSES {
                return Err(SuperpixelError::BadScores(i));
            }
            classes.push(AttributeClass::ALL[s.argmax()]);
        }
        Ok(Self {
            classes,
            scores: Some(scores),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn count(&self, class: AttributeClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

pub type AttributeMasks = [BinaryMask; 5];

/// Mask `c` (in [`AttributeClass::POSITIVE`] order) is 1 exactly on the
/// superpixels predicted as that attribute.
pub fn compose_attribute_masks(
    sp: &SuperpixelMap,
    pred: &AttributePrediction,
) -> Result<AttributeMasks, SuperpixelError> {
    if pred.len() != sp.k() {
        return Err(SuperpixelError::LengthMismatch {
            k: sp.k(),
            got: pred.len(),
        });
    }
    let mut masks: AttributeMasks = std::array::from_fn(|_| BinaryMask::zeros(sp.width, sp.height));
    for r in 0..sp.height {
        for c in 0..sp.width {
            let class = pred.classes[sp.label(r, c)];
            if class != AttributeClass::Absent {
                masks[class.index() - 1].set(r, c, true);
            }
        }
    }
    Ok(masks)
}

/// Reads per-superpixel classes back from composed masks. Every superpixel
/// must be uniformly covered by at most one mask.
pub fn recover_prediction(sp: &SuperpixelMap, masks: &AttributeMasks) -> Result<AttributePrediction, SuperpixelError> {
    if masks.iter().any(|m| m.width() != sp.width || m.height() != sp.height) {
        return Err(SuperpixelError::ShapeMismatch);
    }
    let mut classes: Vec<Option<AttributeClass>> = vec![None; sp.k()];
    for r in 0..sp.height {
        for c in 0..sp.width {
            let region = sp.label(r, c);
            let mut hit = AttributeClass::Absent;
            for (m, class) in masks.iter().zip(AttributeClass::POSITIVE) {
                if m.get(r, c) {
                    if hit != AttributeClass::Absent {
                        return Err(SuperpixelError::Inconsistent(region));
                    }
                    hit = class;
                }
            }
            match classes[region] {
                None => classes[region] = Some(hit),
                Some(prev) if prev != hit => return Err(SuperpixelError::Inconsistent(region)),
                _ => {}
            }
        }
    }
    Ok(AttributePrediction::from_classes(
        classes.into_iter().map(|c| c.expect("every region has pixels")).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum PruneRule {
    /// Drop a positive class when fewer than this many superpixels carry it.
    MinCount(usize),
    /// Experimental: drop positive superpixels whose winning score is below
    /// this value.
    MinScore(f64),
}

impl Default for PruneRule {
    fn default() -> Self {
        PruneRule::MinCount(30)
    }
}

/// Every positive class with fewer than `min_count` superpixels in this
/// prediction is reassigned to `Absent`.
pub fn prune_sparse_positives(pred: &AttributePrediction, min_count: usize) -> AttributePrediction {
    let mut counts = [0usize; N_ATTRIBUTE_CLASSES];
    for c in &pred.classes {
        counts[c.index()] += 1;
    }
    let classes = pred
        .classes
        .iter()
        .map(|&c| {
            if c != AttributeClass::Absent && counts[c.index()] < min_count {
                AttributeClass::Absent
            } else {
                c
            }
        })
        .collect();
    AttributePrediction {
        classes,
        scores: pred.scores.clone(),
    }
}

pub fn prune_low_scores(pred: &AttributePrediction, min_score: f64) -> Result<AttributePrediction, SuperpixelError> {
    let scores = pred.scores.as_ref().ok_or(SuperpixelError::MissingScores)?;
    if scores.len() != pred.len() {
        return Err(SuperpixelError::LengthMismatch {
            k: pred.len(),
            got: scores.len(),
        });
    }
    let classes = pred
        .classes
        .iter()
        .zip(scores)
        .map(|(&c, s)| {
            if c != AttributeClass::Absent && s.0[c.index()] < min_score {
                AttributeClass::Absent
            } else {
                c
            }
        })
        .collect();
    Ok(AttributePrediction {
        classes,
        scores: pred.scores.clone(),
    })
}

pub fn prune(pred: &AttributePrediction, rule: PruneRule) -> Result<AttributePrediction, SuperpixelError> {
    match rule {
        PruneRule::MinCount(n) => Ok(prune_sparse_positives(pred, n)),
        PruneRule::MinScore(s) => prune_low_scores(pred, s),
    }
}
