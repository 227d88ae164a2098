use super::{BinaryMask, ImageError, ProbMask, RasterImage, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    /// Half-pixel-center sampling with edge clamping.
    Bilinear,
}

pub trait Resize: Sized {
    fn resize(&self, width: usize, height: usize, mode: ResizeMode) -> Result<Self, ImageError>;
}

impl Resize for RasterImage {
    fn resize(&self, width: usize, height: usize, mode: ResizeMode) -> Result<Self, ImageError> {
        check_target(width, height)?;
        let data = resample(
            &self.data,
            self.width,
            self.height,
            CHANNELS,
            width,
            height,
            mode,
        );
        Ok(RasterImage {
            width,
            height,
            data,
        })
    }
}

impl Resize for ProbMask {
    fn resize(&self, width: usize, height: usize, mode: ResizeMode) -> Result<Self, ImageError> {
        check_target(width, height)?;
        let data = resample(&self.data, self.width, self.height, 1, width, height, mode);
        Ok(ProbMask {
            width,
            height,
            data,
        })
    }
}

impl Resize for BinaryMask {
    fn resize(&self, width: usize, height: usize, mode: ResizeMode) -> Result<Self, ImageError> {
        check_target(width, height)?;
        if mode == ResizeMode::Bilinear {
            return Err(ImageError::BilinearOnBinary);
        }
        let xs = nearest_index(self.width, width);
        let ys = nearest_index(self.height, height);
        let data = ys
            .iter()
            .flat_map(|&sy| xs.iter().map(move |&sx| (sy, sx)))
            .map(|(sy, sx)| self.data[sy * self.width + sx])
            .collect();
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }
}

fn check_target(w: usize, h: usize) -> Result<(), ImageError> {
    if w == 0 || h == 0 {
        return Err(ImageError::EmptyDimensions(w, h));
    }
    Ok(())
}

fn nearest_index(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|x| (((x as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}

/// Source taps and weights for one output coordinate.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|x| {
            let s = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn resample(
    data: &[f64],
    sw: usize,
    sh: usize,
    ch: usize,
    dw: usize,
    dh: usize,
    mode: ResizeMode,
) -> Vec<f64> {
    if sw == dw && sh == dh {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(dw * dh * ch);
    match mode {
        ResizeMode::Nearest => {
            let xs = nearest_index(sw, dw);
            let ys = nearest_index(sh, dh);
            for &sy in &ys {
                for &sx in &xs {
                    let base = (sy * sw + sx) * ch;
                    out.extend_from_slice(&data[base..base + ch]);
                }
            }
        }
        ResizeMode::Bilinear => {
            let xs = bilinear_taps(sw, dw);
            let ys = bilinear_taps(sh, dh);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    for c in 0..ch {
                        let at = |y: usize, x: usize| data[(y * sw + x) * ch + c];
                        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                        out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    out
}
