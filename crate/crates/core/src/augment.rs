//! Training augmentation and test-time replicas.
//!
//! Geometry is applied as one inverse mapping from output pixels back to the
//! source, composed in the fixed order crop → flip → rotate → shear → scale,
//! then sampled bilinearly with symmetric (edge-including) reflection for
//! anything outside the image. Colour jitter runs last, in the order
//! brightness → contrast → saturation → hue.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgops::{RasterImage, CHANNELS};
use crate::prediction::{mean_predictions, PredictionError, PredictionVector};

/// Crop draws kept per sample; the first one that fits the image is used.
pub const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("range `{name}` has lower bound {lo} above upper bound {hi}")]
    InvertedRange { name: &'static str, lo: f64, hi: f64 },
    #[error("range `{name}` = [{lo}, {hi}] is outside the allowed [{min}, {max}]")]
    OutOfBounds {
        name: &'static str,
        lo: f64,
        hi: f64,
        min: f64,
        max: f64,
    },
    #[error("unknown augmentation key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
}

pub type Range = (f64, f64);

/// Parameter ranges for one augmentation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Fraction of the original area kept by the crop.
    pub crop_area: Range,
    /// Crop aspect ratio relative to the original aspect ratio.
    pub crop_aspect: Range,
    /// When enabled, each flip happens with probability 1/2.
    pub hflip: bool,
    pub vflip: bool,
    /// Degrees, counter-clockwise as displayed.
    pub rotation: Range,
    /// Horizontal shear angle in degrees.
    pub shear: Range,
    /// Area scale factor; linear zoom is its square root.
    pub area_scale: Range,
    pub brightness: Range,
    pub contrast: Range,
    pub saturation: Range,
    /// Hue shift as a fraction of the hue circle.
    pub hue: Range,
    /// Output `(width, height)`; `None` keeps the input size.
    pub output_size: Option<(usize, usize)>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::scenario_j()
    }
}

impl AugmentSpec {
    pub fn scenario_j() -> Self {
        Self {
            crop_area: (0.4, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            hflip: true,
            vflip: true,
            rotation: (0.0, 90.0),
            shear: (0.0, 20.0),
            area_scale: (0.8, 1.2),
            brightness: (0.7, 1.3),
            contrast: (0.7, 1.3),
            saturation: (0.7, 1.3),
            hue: (-0.05, 0.05),
            output_size: None,
        }
    }

    /// Every range collapsed to its neutral value and flips disabled.
    pub fn identity() -> Self {
        Self {
            crop_area: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            hflip: false,
            vflip: false,
            rotation: (0.0, 0.0),
            shear: (0.0, 0.0),
            area_scale: (1.0, 1.0),
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: (0.0, 0.0),
            output_size: None,
        }
    }

    /// Keeps flips and colour jitter, drops every other geometric change and
    /// the output resize so patch centering is preserved.
    pub fn flips_color_only(&self) -> Self {
        let id = Self::identity();
        Self {
            hflip: self.hflip,
            vflip: self.vflip,
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
            hue: self.hue,
            ..id
        }
    }

    fn ranges(&self) -> [(&'static str, Range, f64, f64); 9] {
        [
            ("crop_area", self.crop_area, f64::MIN_POSITIVE, 1.0),
            ("crop_aspect", self.crop_aspect, f64::MIN_POSITIVE, f64::MAX),
            ("rotation", self.rotation, -360.0, 360.0),
            ("shear", self.shear, -89.0, 89.0),
            ("area_scale", self.area_scale, f64::MIN_POSITIVE, f64::MAX),
            ("brightness", self.brightness, 0.0, f64::MAX),
            ("contrast", self.contrast, 0.0, f64::MAX),
            ("saturation", self.saturation, 0.0, f64::MAX),
            ("hue", self.hue, -0.5, 0.5),
        ]
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, (lo, hi), min, max) in self.ranges() {
            if !(lo <= hi) {
                return Err(AugmentError::InvertedRange { name, lo, hi });
            }
            if lo < min || hi > max {
                return Err(AugmentError::OutOfBounds { name, lo, hi, min, max });
            }
        }
        Ok(())
    }

    /// Flat `key=value` lines; ranges are written as `lo,hi`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (name, (lo, hi), _, _) in self.ranges() {
            out.push_str(&format!("{name}={lo},{hi}\n"));
        }
        out.push_str(&format!("hflip={}\nvflip={}\n", self.hflip, self.vflip));
        if let Some((w, h)) = self.output_size {
            out.push_str(&format!("output_size={w}x{h}\n"));
        }
        out
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn with_kv(mut self, entries: &BTreeMap<String, String>) -> Result<Self, AugmentError> {
        for (key, value) in entries {
            let bad = || AugmentError::BadValue {
                key: key.clone(),
                value: value.clone(),
            };
            let range = || -> Result<Range, AugmentError> {
                let (lo, hi) = value.split_once(',').ok_or_else(bad)?;
                Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
            };
            match key.as_str() {
                "crop_area" => self.crop_area = range()?,
                "crop_aspect" => self.crop_aspect = range()?,
                "rotation" => self.rotation = range()?,
                "shear" => self.shear = range()?,
                "area_scale" => self.area_scale = range()?,
                "brightness" => self.brightness = range()?,
                "contrast" => self.contrast = range()?,
                "saturation" => self.saturation = range()?,
                "hue" => self.hue = range()?,
                "hflip" => self.hflip = value.parse().map_err(|_| bad())?,
                "vflip" => self.vflip = value.parse().map_err(|_| bad())?,
                "output_size" => {
                    let (w, h) = value.split_once('x').ok_or_else(bad)?;
                    let w: usize = w.parse().map_err(|_| bad())?;
                    let h: usize = h.parse().map_err(|_| bad())?;
                    if w == 0 || h == 0 {
                        return Err(bad());
                    }
                    self.output_size = Some((w, h));
                }
                _ => return Err(AugmentError::UnknownKey(key.clone())),
            }
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropDraw {
    pub area: f64,
    pub aspect: f64,
    /// Position of the window inside the free slack, each in `[0, 1]`.
    pub x: f64,
    pub y: f64,
}

/// Concrete parameters for one augmented view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledAugmentation {
    pub seed: u64,
    pub crops: Vec<CropDraw>,
    pub hflip: bool,
    pub vflip: bool,
    pub rotation: f64,
    pub shear: f64,
    pub area_scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub output_size: Option<(usize, usize)>,
}

impl SampledAugmentation {
    pub fn identity() -> Self {
        sample_augmentation(&AugmentSpec::identity(), 0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): Range) -> f64 {
    // always consume one draw so the stream layout does not depend on which transforms are enabled
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

pub fn sample_augmentation(spec: &AugmentSpec, seed: u64) -> SampledAugmentation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = (0..CROP_ATTEMPTS)
        .map(|_| CropDraw {
            area: uniform(&mut rng, spec.crop_area),
            aspect: uniform(&mut rng, spec.crop_aspect),
            x: uniform(&mut rng, (0.0, 1.0)),
            y: uniform(&mut rng, (0.0, 1.0)),
        })
        .collect();
    let hflip = rng.random_bool(0.5) && spec.hflip;
    let vflip = rng.random_bool(0.5) && spec.vflip;
    SampledAugmentation {
        seed,
        crops,
        hflip,
        vflip,
        rotation: uniform(&mut rng, spec.rotation),
        shear: uniform(&mut rng, spec.shear),
        area_scale: uniform(&mut rng, spec.area_scale),
        brightness: uniform(&mut rng, spec.brightness),
        contrast: uniform(&mut rng, spec.contrast),
        saturation: uniform(&mut rng, spec.saturation),
        hue: uniform(&mut rng, spec.hue),
        output_size: spec.output_size,
    }
}

/// Crop window `(x0, y0, w, h)` in continuous source coordinates.
fn crop_window(a: &SampledAugmentation, w: f64, h: f64) -> (f64, f64, f64, f64) {
    const SLACK: f64 = 1e-9;
    for c in &a.crops {
        let cw = w * (c.area * c.aspect).sqrt();
        let ch = h * (c.area / c.aspect).sqrt();
        if cw <= w + SLACK && ch <= h + SLACK {
            let (cw, ch) = (cw.min(w), ch.min(h));
            return (c.x * (w - cw), c.y * (h - ch), cw, ch);
        }
    }
    let side = w.min(h);
    ((w - side) / 2.0, (h - side) / 2.0, side, side)
}

/// Symmetric reflection: -1 → 0, n → n − 1, period 2n.
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn sample_reflect(img: &RasterImage, x: f64, y: f64) -> [f64; 3] {
    let (x, y) = (snap(x), snap(y));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (w, h) = (img.width(), img.height());
    let xs = [reflect(x0 as i64, w), reflect(x0 as i64 + 1, w)];
    let ys = [reflect(y0 as i64, h), reflect(y0 as i64 + 1, h)];
    let mut out = [0.0; 3];
    let weights = [
        ((1.0 - fy) * (1.0 - fx), ys[0], xs[0]),
        ((1.0 - fy) * fx, ys[0], xs[1]),
        (fy * (1.0 - fx), ys[1], xs[0]),
        (fy * fx, ys[1], xs[1]),
    ];
    for (wt, r, c) in weights {
        if wt == 0.0 {
            continue;
        }
        let p = img.pixel(r, c);
        for k in 0..CHANNELS {
            out[k] += wt * p[k];
        }
    }
    out
}

pub fn apply_augmentation(img: &RasterImage, a: &SampledAugmentation) -> RasterImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (x0, y0, cw, ch) = crop_window(a, w, h);
    let (cx, cy) = (x0 + cw / 2.0, y0 + ch / 2.0);
    let (ow, oh) = a.output_size.unwrap_or((img.width(), img.height()));

    let zoom = a.area_scale.sqrt();
    let shear = a.shear.to_radians().tan();
    let (sin, cos) = a.rotation.to_radians().sin_cos();

    let mut out = RasterImage::filled(ow, oh, [0.0; 3]);
    for v in 0..oh {
        for u in 0..ow {
            // output point relative to the crop centre, in source pixels
            let mut x = ((u as f64 + 0.5) / ow as f64 - 0.5) * cw;
            let mut y = ((v as f64 + 0.5) / oh as f64 - 0.5) * ch;
            x /= zoom;
            y /= zoom;
            x -= shear * y;
            let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
            x = if a.hflip { -rx } else { rx };
            y = if a.vflip { -ry } else { ry };
            let p = sample_reflect(img, cx + x - 0.5, cy + y - 0.5);
            out.set_pixel(v, u, p);
        }
    }
    jitter_color(&mut out, a);
    out
}

fn jitter_color(img: &mut RasterImage, a: &SampledAugmentation) {
    let (w, h) = (img.width(), img.height());
    let map = |img: &mut RasterImage, f: &dyn Fn([f64; 3]) -> [f64; 3]| {
        for r in 0..h {
            for c in 0..w {
                let p = img.pixel(r, c);
                img.set_pixel(r, c, f(p));
            }
        }
    };
    if a.brightness != 1.0 {
        map(img, &|p| p.map(|v| v * a.brightness));
    }
    if a.contrast != 1.0 {
        let luma = img.luminance();
        let mean = luma.iter().sum::<f64>() / luma.len() as f64;
        map(img, &|p| p.map(|v| (v - mean) * a.contrast + mean));
    }
    if a.saturation != 1.0 {
        map(img, &|p| {
            let g = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            p.map(|v| g + (v - g) * a.saturation)
        });
    }
    if a.hue != 0.0 {
        map(img, &|p| {
            let (hh, s, v) = rgb_to_hsv(p);
            hsv_to_rgb(((hh + a.hue) % 1.0 + 1.0) % 1.0, s, v)
        });
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    /// Full recipe (crop, flips, rotation, shear, scale, colour).
    FullScenarioJ,
    /// Flips and colour jitter only.
    FlipsColorOnly,
}

impl TtaMode {
    /// Default replica count: 16 for patches, 128 for final whole-image tests.
    pub fn default_replicas(self) -> usize {
        match self {
            TtaMode::FullScenarioJ => 128,
            TtaMode::FlipsColorOnly => 16,
        }
    }
}

/// `n` replicas; replica `i` uses seed `seed + i`.
pub fn make_tta_replicas(
    img: &RasterImage,
    n: usize,
    mode: TtaMode,
    spec: &AugmentSpec,
    seed: u64,
) -> Vec<RasterImage> {
    let spec = match mode {
        TtaMode::FullScenarioJ => spec.clone(),
        TtaMode::FlipsColorOnly => spec.flips_color_only(),
    };
    (0..n as u64)
        .map(|i| apply_augmentation(img, &sample_augmentation(&spec, seed.wrapping_add(i))))
        .collect()
}

/// Decision for one image: the per-class mean over its replicas.
pub fn average_replica_predictions(preds: &[PredictionVector]) -> Result<PredictionVector, PredictionError> {
    mean_predictions(preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: usize, h: usize) -> RasterImage {
        let data = (0..w * h * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        RasterImage::new(w, h, data).unwrap()
    }

    #[test]
    fn degenerate_spec_gives_that_transform() {
        let mut spec = AugmentSpec::identity();
        spec.rotation = (30.0, 30.0);
        spec.brightness = (1.1, 1.1);
        let a = sample_augmentation(&spec, 77);
        assert_eq!(a.rotation, 30.0);
        assert_eq!(a.brightness, 1.1);
        assert!(!a.hflip && !a.vflip);
        assert!(a.crops.iter().all(|c| c.area == 1.0 && c.aspect == 1.0));
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = AugmentSpec::scenario_j();
        assert_eq!(sample_augmentation(&spec, 5), sample_augmentation(&spec, 5));
        assert_ne!(sample_augmentation(&spec, 5), sample_augmentation(&spec, 6));
    }

    #[test]
    fn rotation_monte_carlo() {
        let spec = AugmentSpec::scenario_j();
        let rots: Vec<f64> = (0..10_000).map(|s| sample_augmentation(&spec, s).rotation).collect();
        let min = rots.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = rots.iter().sum::<f64>() / rots.len() as f64;
        assert!(min >= 0.0 && max <= 90.0);
        assert!((mean - 45.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn identity_is_pixel_exact() {
        for (w, h) in [(5, 5), (7, 4), (1, 3)] {
            let img = pattern(w, h);
            assert_eq!(apply_augmentation(&img, &SampledAugmentation::identity()), img);
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = pattern(6, 5);
        let mut a = SampledAugmentation::identity();
        a.hflip = true;
        let once = apply_augmentation(&img, &a);
        assert_eq!(once.pixel(0, 0), img.pixel(0, 5));
        assert_eq!(apply_augmentation(&once, &a), img);
    }

    #[test]
    fn quarter_turn_of_3x3() {
        // single-channel pattern replicated on all channels
        let src = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let mut img = RasterImage::filled(3, 3, [0.0; 3]);
        for r in 0..3 {
            for c in 0..3 {
                img.set_pixel(r, c, [src[r][c] / 10.0; 3]);
            }
        }
        let mut a = SampledAugmentation::identity();
        a.rotation = 90.0;
        let out = apply_augmentation(&img, &a);
        // counter-clockwise as displayed
        let expected = [[3.0, 6.0, 9.0], [2.0, 5.0, 8.0], [1.0, 4.0, 7.0]];
        for r in 0..3 {
            for c in 0..3 {
                assert!((out.pixel(r, c)[0] - expected[r][c] / 10.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflection_is_symmetric() {
        let idx: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn output_size_is_honoured() {
        let img = pattern(20, 14);
        let mut spec = AugmentSpec::scenario_j();
        spec.output_size = Some((8, 9));
        for s in 0..20 {
            let out = apply_augmentation(&img, &sample_augmentation(&spec, s));
            assert_eq!((out.width(), out.height()), (8, 9));
        }
    }

    #[test]
    fn oversized_crops_fall_back_to_centre() {
        let mut a = SampledAugmentation::identity();
        for c in &mut a.crops {
            c.area = 1.0;
            c.aspect = 2.0;
        }
        assert_eq!(crop_window(&a, 10.0, 6.0), (2.0, 0.0, 6.0, 6.0));
    }

    #[test]
    fn tta_replicas() {
        let img = pattern(9, 9);
        let one = make_tta_replicas(&img, 1, TtaMode::FullScenarioJ, &AugmentSpec::identity(), 3);
        assert_eq!(one, vec![img.clone()]);
        let spec = AugmentSpec::scenario_j();
        let a = make_tta_replicas(&img, 16, TtaMode::FullScenarioJ, &spec, 11);
        let b = make_tta_replicas(&img, 16, TtaMode::FullScenarioJ, &spec, 11);
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        // replica i with seed s equals replica 0 with seed s + i
        let shifted = make_tta_replicas(&img, 1, TtaMode::FullScenarioJ, &spec, 14);
        assert_eq!(shifted[0], a[3]);
    }

    #[test]
    fn flips_color_only_keeps_marked_pixel_on_flip_orbit() {
        let (w, h) = (11, 7);
        let (mr, mc) = (2, 3);
        let mut img = RasterImage::filled(w, h, [0.1; 3]);
        img.set_pixel(mr, mc, [1.0, 0.2, 0.2]);
        let orbit = [(mr, mc), (mr, w - 1 - mc), (h - 1 - mr, mc), (h - 1 - mr, w - 1 - mc)];
        for rep in make_tta_replicas(&img, 16, TtaMode::FlipsColorOnly, &AugmentSpec::scenario_j(), 0) {
            assert_eq!((rep.width(), rep.height()), (w, h));
            let mut best = (0, 0);
            let mut best_v = f64::NEG_INFINITY;
            for r in 0..h {
                for c in 0..w {
                    let p = rep.pixel(r, c);
                    let v = (p[0] - 0.1).abs() + (p[1] - 0.1).abs() + (p[2] - 0.1).abs();
                    if v > best_v {
                        best_v = v;
                        best = (r, c);
                    }
                }
            }
            assert!(orbit.contains(&best), "{best:?}");
        }
    }

    #[test]
    fn kv_round_trip_and_validation() {
        let mut spec = AugmentSpec::scenario_j();
        spec.output_size = Some((224, 224));
        let text = spec.to_kv();
        let entries = crate::config::parse_kv(&text).unwrap();
        assert_eq!(AugmentSpec::identity().with_kv(&entries).unwrap(), spec);

        let mut bad = BTreeMap::new();
        bad.insert("rotation".to_string(), "10,5".to_string());
        assert!(matches!(
            AugmentSpec::scenario_j().with_kv(&bad),
            Err(AugmentError::InvertedRange { name: "rotation", .. })
        ));
        bad.clear();
        bad.insert("warp".to_string(), "1".to_string());
        assert_eq!(
            AugmentSpec::scenario_j().with_kv(&bad),
            Err(AugmentError::UnknownKey("warp".into()))
        );
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let (h, s, v) = rgb_to_hsv(p);
            let q = hsv_to_rgb(h, s, v);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn averaging() {
        let v = PredictionVector(vec![0.2, 0.3, 0.5]);
        let m = average_replica_predictions(&[v.clone(), v.clone(), v.clone()]).unwrap();
        for (a, b) in m.0.iter().zip(&v.0) {
            assert!((a - b).abs() < 1e-15);
        }
        let m = average_replica_predictions(&[PredictionVector(vec![1.0, 0.0]), PredictionVector(vec![0.0, 1.0])])
            .unwrap();
        assert_eq!(m.0, vec![0.5, 0.5]);
    }
}
