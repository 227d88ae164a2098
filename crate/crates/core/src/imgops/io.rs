//! PNG encoding for images and masks.
//!
//! Binary masks are 8-bit grayscale with values {0, 255}; any non-zero
//! sample reads back as foreground. Probability masks are 16-bit grayscale
//! scaled by 65535.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use thiserror::Error;

use super::{BinaryMask, ImageError, ProbMask, RasterImage};

#[derive(Debug, Error)]
pub enum PngError {
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Shape {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
}

fn codec(path: &Path) -> impl FnOnce(image::ImageError) -> PngError + '_ {
    move |source| PngError::Codec {
        path: path.to_path_buf(),
        source,
    }
}

fn shape(path: &Path) -> impl FnOnce(ImageError) -> PngError + '_ {
    move |source| PngError::Shape {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<RasterImage, PngError> {
    let img = image::open(path).map_err(codec(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    RasterImage::from_u8(w as usize, h as usize, img.as_raw()).map_err(shape(path))
}

pub fn write_rgb(path: &Path, img: &RasterImage) -> Result<(), PngError> {
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
            .expect("buffer length checked at construction");
    buf.save(path).map_err(codec(path))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, PngError> {
    let img = image::open(path).map_err(codec(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v > 0).collect();
    BinaryMask::new(w as usize, h as usize, data).map_err(shape(path))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), PngError> {
    let raw = mask.data().iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .expect("buffer length checked at construction");
    buf.save(path).map_err(codec(path))
}

pub fn read_prob(path: &Path) -> Result<ProbMask, PngError> {
    let img = image::open(path).map_err(codec(path))?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&v| f64::from(v) / 65535.0)
        .collect();
    ProbMask::new(w as usize, h as usize, data).map_err(shape(path))
}

pub fn write_prob(path: &Path, mask: &ProbMask) -> Result<(), PngError> {
    let raw = mask
        .data()
        .iter()
        .map(|&v| (v * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .expect("buffer length checked at construction");
    buf.save(path).map_err(codec(path))
}
