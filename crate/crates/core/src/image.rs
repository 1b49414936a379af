//! Dense H×W×C floating-point images.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{shape_err, Error, Result};

/// Row-major `height × width × channels` image of `f64` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(shape_err!(
                "buffer of {} values does not hold {width}x{height}x{channels}",
                data.len()
            ));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image { width, height, channels, data }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        let i = self.idx(y, x, c);
        &mut self.data[i]
    }

    /// Sample with coordinates clamped to the image (replicate padding).
    #[inline]
    pub fn at_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.at(yy, xx, c)
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err!(
                "{}x{}x{} vs {}x{}x{}",
                self.width,
                self.height,
                self.channels,
                other.width,
                other.height,
                other.channels
            ))
        }
    }

    /// Non-overlapping `s×s` box average. Dimensions must be divisible by `s`.
    pub fn box_downsample(&self, s: usize) -> Result<Image> {
        if s == 0 || self.width % s != 0 || self.height % s != 0 {
            return Err(shape_err!(
                "{}x{} is not divisible by downsampling factor {s}",
                self.width,
                self.height
            ));
        }
        let (w, h, ch) = (self.width / s, self.height / s, self.channels);
        let norm = 1.0 / (s * s) as f64;
        let mut out = Image::new(w, h, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for dy in 0..s {
                        for dx in 0..s {
                            acc += self.at(y * s + dy, x * s + dx, c);
                        }
                    }
                    *out.at_mut(y, x, c) = acc * norm;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Image::box_downsample`]: spreads each gradient value over its block.
    pub fn box_downsample_backward(grad: &Image, s: usize) -> Image {
        let norm = 1.0 / (s * s) as f64;
        Image::from_fn(grad.width * s, grad.height * s, grad.channels, |y, x, c| {
            grad.at(y / s, x / s, c) * norm
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(shape_err!(
                "crop {w}x{h} at ({x0},{y0}) exceeds {}x{}",
                self.width,
                self.height
            ));
        }
        Ok(Image::from_fn(w, h, self.channels, |y, x, c| self.at(y0 + y, x0 + x, c)))
    }

    /// Write `patch` into this image with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, patch: &Image, x0: usize, y0: usize) {
        for y in 0..patch.height {
            for x in 0..patch.width {
                for c in 0..patch.channels {
                    *self.at_mut(y0 + y, x0 + x, c) = patch.at(y, x, c);
                }
            }
        }
    }

    /// Rec. 601 luma of an RGB image.
    pub fn luminance(&self) -> Image {
        debug_assert_eq!(self.channels, 3);
        Image::from_fn(self.width, self.height, 1, |y, x, _| {
            let p = self.pixel(y, x);
            if p[0] == p[1] && p[1] == p[2] {
                p[0]
            } else {
                LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
            }
        })
    }

    pub fn transpose(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| self.at(x, y, c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Resolution level of a posed image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelTag {
    /// Training resolution.
    Lr,
    /// Training resolution downsampled once more by the scale factor.
    Llr,
    /// Super-resolved output (or reference) resolution.
    Hr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosedImage {
    pub pixels: Image,
    pub pose: CameraPose,
    pub level: LevelTag,
}

impl PosedImage {
    pub fn new(pixels: Image, pose: CameraPose, level: LevelTag) -> Result<Self> {
        if pixels.channels != 3 {
            return Err(shape_err!("posed images are RGB, got {} channels", pixels.channels));
        }
        if pixels.width != pose.width || pixels.height != pose.height {
            return Err(shape_err!(
                "image is {}x{} but pose expects {}x{}",
                pixels.width,
                pixels.height,
                pose.width,
                pose.height
            ));
        }
        if pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
        }
        Ok(PosedImage { pixels, pose, level })
    }
}

/// Downsample a ground-truth view by `s` with an `s×s` box average, producing the
/// LLR level used as the internal-learning target.
pub fn downsample_gt(img: &PosedImage, s: usize) -> Result<PosedImage> {
    let pixels = img.pixels.box_downsample(s)?;
    let pose = img.pose.scaled(pixels.width, pixels.height);
    Ok(PosedImage { pixels, pose, level: LevelTag::Llr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn box_of_constant_is_constant() {
        let img = Image::filled(8, 6, 3, 0.5);
        let out = img.box_downsample(2).unwrap();
        assert_eq!((out.width, out.height), (4, 3));
        assert!(out.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn two_by_two_mean() {
        let img = Image::from_vec(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let out = img.box_downsample(2).unwrap();
        assert_eq!(out.data, vec![0.5]);
    }

    #[test]
    fn box_matches_naive_double_loop() {
        let mut rng = seeded(3);
        let img = Image::from_fn(8, 8, 3, |_, _, _| rng.gen::<f64>());
        let out = img.box_downsample(4).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..3 {
                    let mut sum = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            if y / 4 == oy && x / 4 == ox {
                                sum += img.at(y, x, c);
                            }
                        }
                    }
                    assert!((out.at(oy, ox, c) - sum / 16.0).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn indivisible_dimensions_are_rejected() {
        let img = Image::new(6, 5, 3);
        assert!(matches!(img.box_downsample(2), Err(Error::Shape(_))));
    }

    #[test]
    fn box_backward_is_adjoint() {
        let mut rng = seeded(11);
        let x = Image::from_fn(6, 4, 2, |_, _, _| rng.gen::<f64>());
        let g = Image::from_fn(3, 2, 2, |_, _, _| rng.gen::<f64>());
        let lhs: f64 =
            x.box_downsample(2).unwrap().data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let gb = Image::box_downsample_backward(&g, 2);
        let rhs: f64 = x.data.iter().zip(&gb.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
