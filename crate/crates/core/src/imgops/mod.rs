//! Raster types and the handful of pixel operations the pipelines need:
//! resizing, channel normalization, binarization and hole filling.
//!
//! All samples are `f64`. Colour images are interleaved RGB in row-major
//! order with values in `[0, 1]`.

mod fill;
pub mod io;
mod resize;

pub use fill::fill_holes;
pub use resize::{Resize, ResizeMode};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("buffer length {got} does not match {width}x{height}x{channels}")]
    BadLength {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("sample value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("dimensions must be at least 1x1, got {0}x{1}")]
    EmptyDimensions(usize, usize),
    #[error("bilinear interpolation is not allowed for binary masks")]
    BilinearOnBinary,
    #[error("channel {0} has non-positive standard deviation")]
    ZeroStd(usize),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

pub const CHANNELS: usize = 3;

/// RGB image with unit-interval samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_len(width, height, CHANNELS, data.len())?;
        check_unit(&data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds an image from 8-bit samples, scaling by 1/255.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        check_len(width, height, CHANNELS, bytes.len())?;
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// ITU-R BT.601 luma per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        channel_stats(std::slice::from_ref(self))
    }
}

/// Pooled per-channel mean and standard deviation over a set of images,
/// e.g. the training split of the active fold.
pub fn channel_stats(images: &[RasterImage]) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for p in img.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sum[c] += p[c];
                sq[c] += p[c] * p[c];
            }
            n += 1;
        }
    }
    if n == 0 {
        return ([0.0; 3], [0.0; 3]);
    }
    let n = n as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for c in 0..CHANNELS {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    (mean, std)
}

/// Channel-normalized image; samples are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// `out[c] = (in[c] - mean[c]) / std[c]` for every pixel.
pub fn normalize_channels(
    img: &RasterImage,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<NormalizedImage, ImageError> {
    if let Some(c) = std.iter().position(|s| !(*s > 0.0)) {
        return Err(ImageError::ZeroStd(c));
    }
    let data = img
        .data
        .chunks_exact(CHANNELS)
        .flat_map(|p| (0..CHANNELS).map(move |c| (p[c] - mean[c]) / std[c]))
        .collect();
    Ok(NormalizedImage {
        width: img.width,
        height: img.height,
        data,
    })
}

impl NormalizedImage {
    /// Inverse of [`normalize_channels`]. Values are not clamped.
    pub fn denormalize(&self, mean: [f64; 3], std: [f64; 3]) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .flat_map(|p| (0..CHANNELS).map(move |c| p[c] * std[c] + mean[c]))
            .collect()
    }
}

/// Strictly binary single-channel mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, ImageError> {
        check_len(width, height, 1, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Self) -> Result<(), ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn to_prob(&self) -> ProbMask {
        ProbMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-pixel probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_len(width, height, 1, data.len())?;
        check_unit(&data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, w: usize, h: usize) -> Result<(), ImageError> {
        if self.width != w || self.height != h {
            return Err(ImageError::ShapeMismatch(self.width, self.height, w, h));
        }
        Ok(())
    }
}

/// `1` where `p >= threshold`.
pub fn binarize(p: &ProbMask, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|&v| v >= threshold).collect(),
    }
}

fn check_len(w: usize, h: usize, ch: usize, got: usize) -> Result<(), ImageError> {
    if w == 0 || h == 0 {
        return Err(ImageError::EmptyDimensions(w, h));
    }
    if w * h * ch != got {
        return Err(ImageError::BadLength {
            width: w,
            height: h,
            channels: ch,
            got,
        });
    }
    Ok(())
}

fn check_unit(data: &[f64]) -> Result<(), ImageError> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(ImageError::OutOfRange {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> RasterImage {
        let data = (0..4 * 3 * 3).map(|i| (i % 17) as f64 / 16.0).collect();
        RasterImage::new(4, 3, data).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            RasterImage::new(2, 2, vec![0.0; 11]),
            Err(ImageError::BadLength { .. })
        ));
        assert!(matches!(
            ProbMask::new(1, 1, vec![1.5]),
            Err(ImageError::OutOfRange { .. })
        ));
        assert!(matches!(
            BinaryMask::new(0, 3, vec![]),
            Err(ImageError::EmptyDimensions(0, 3))
        ));
    }

    #[test]
    fn normalize_with_own_mean_centers_channels() {
        let img = test_image();
        let (mean, _) = img.channel_stats();
        let out = normalize_channels(&img, mean, [1.0; 3]).unwrap();
        let n = (img.width() * img.height()) as f64;
        for c in 0..3 {
            let m: f64 = out.data.iter().skip(c).step_by(3).sum::<f64>() / n;
            assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_identity_and_closed_form() {
        let img = test_image();
        let out = normalize_channels(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(out.data, img.data());

        let half = RasterImage::filled(3, 2, [0.5; 3]);
        let z = normalize_channels(&half, [0.5; 3], [0.25; 3]).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let ones = normalize_channels(&half, [0.25; 3], [0.25; 3]).unwrap();
        assert!(ones.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_rejects_zero_std() {
        let img = test_image();
        assert_eq!(
            normalize_channels(&img, [0.0; 3], [1.0, 0.0, 1.0]),
            Err(ImageError::ZeroStd(1))
        );
    }

    #[test]
    fn normalize_round_trips() {
        let img = test_image();
        let mean = [0.3, 0.5, 0.7];
        let std = [0.2, 0.9, 0.05];
        let back = normalize_channels(&img, mean, std).unwrap().denormalize(mean, std);
        for (a, b) in back.iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn binarize_uses_greater_or_equal() {
        let all = binarize(&ProbMask::filled(3, 3, 0.9), 0.5);
        assert!(all.data().iter().all(|&b| b));
        let edge = binarize(&ProbMask::filled(3, 3, 0.5), 0.5);
        assert!(edge.data().iter().all(|&b| b));

        let data = (0..16)
            .map(|i| if (i / 4 + i % 4) % 2 == 0 { 0.4 } else { 0.6 })
            .collect();
        let checker = binarize(&ProbMask::new(4, 4, data).unwrap(), 0.5);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(checker.get(r, c), (r + c) % 2 == 1);
            }
        }
    }
}
