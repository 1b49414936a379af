//! Patch bundles: an `s·p × s·p` grid of sub-pixel rays tied to one `p×p`
//! ground-truth patch, and the density-masked sampler that draws them.

use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::error::{config_err, Result};
use crate::field::RadianceField;
use crate::image::{Image, PosedImage};
use crate::render::ray_opacity;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBundle {
    /// Index of the source view.
    pub view: usize,
    /// Top-left LR pixel of the patch.
    pub anchor: (usize, usize),
    pub patch_size: usize,
    pub scale: usize,
    pub gt_patch: Image,
    /// Row-major over the `(s·p)²` sub-pixel grid.
    pub rays: Vec<Ray>,
    pub mask_keep: bool,
}

impl PatchBundle {
    /// Bundle for the `p×p` patch of `image` anchored at LR pixel `(u0, v0)`.
    pub fn new(image: &PosedImage, view: usize, u0: usize, v0: usize, p: usize, s: usize) -> Result<Self> {
        if s == 0 || p == 0 {
            return Err(config_err!("patch size and scale must be positive"));
        }
        let gt_patch = image.pixels.crop(u0, v0, p, p)?;
        let q = s * p;
        let inv = 1.0 / s as f64;
        let mut rays = Vec::with_capacity(q * q);
        for row in 0..q {
            for col in 0..q {
                let u = u0 as f64 + (col as f64 + 0.5) * inv;
                let v = v0 as f64 + (row as f64 + 0.5) * inv;
                rays.push(image.pose.ray_through(u, v));
            }
        }
        Ok(PatchBundle { view, anchor: (u0, v0), patch_size: p, scale: s, gt_patch, rays, mask_keep: true })
    }

    /// Side length of the rendered patch.
    pub fn hr_size(&self) -> usize {
        self.scale * self.patch_size
    }
}

/// Density-mask settings for patch selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Minimum peak coarse opacity for a patch to count as occupied.
    pub tau: f64,
    /// Probability of keeping an unoccupied patch anyway.
    pub keep_bg: f64,
    /// Draw budget as a multiple of the requested batch.
    pub draw_factor: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { tau: 0.01, keep_bg: 0.2, draw_factor: 50 }
    }
}

/// Outcome of one batch draw.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub bundles: Vec<PatchBundle>,
    /// Set when the draw budget ran out before `batch` patches were kept.
    pub short: bool,
    pub draws: usize,
}

/// Uniform patch sampler with optional per-pixel coarse opacity maps.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    pub patch_size: usize,
    pub scale: usize,
    pub mask: MaskConfig,
    /// Per view, the LR-resolution accumulated opacity of the coarse field.
    opacity: Option<Vec<Image>>,
}

impl PatchSampler {
    /// Without a coarse field every patch is kept.
    pub fn new<F: RadianceField + ?Sized>(
        images: &[PosedImage],
        coarse: Option<&F>,
        patch_size: usize,
        scale: usize,
        mask: MaskConfig,
        samples: usize,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(config_err!("no images to sample patches from"));
        }
        for img in images {
            if img.pixels.width < patch_size || img.pixels.height < patch_size {
                return Err(config_err!(
                    "patch size {patch_size} exceeds image {}x{}",
                    img.pixels.width,
                    img.pixels.height
                ));
            }
        }
        let opacity = coarse.map(|field| {
            images
                .iter()
                .map(|img| {
                    let pose = &img.pose;
                    Image::from_fn(pose.width, pose.height, 1, |y, x, _| {
                        ray_opacity(field, &pose.ray_through(x as f64 + 0.5, y as f64 + 0.5), samples)
                    })
                })
                .collect()
        });
        Ok(PatchSampler { patch_size, scale, mask, opacity })
    }

    /// Peak coarse opacity inside a patch, or `None` without a coarse field.
    pub fn peak_opacity(&self, view: usize, u0: usize, v0: usize) -> Option<f64> {
        let map = &self.opacity.as_ref()?[view];
        let p = self.patch_size;
        let mut peak: f64 = 0.0;
        for y in v0..v0 + p {
            for x in u0..u0 + p {
                peak = peak.max(map.at(y, x, 0));
            }
        }
        Some(peak)
    }

    /// Draw `batch` kept bundles using at most `draw_factor · batch` anchor draws.
    pub fn sample<R: Rng + ?Sized>(&self, images: &[PosedImage], batch: usize, rng: &mut R) -> Result<PatchSample> {
        let p = self.patch_size;
        let budget = self.mask.draw_factor.max(1) * batch;
        let mut bundles = Vec::with_capacity(batch);
        let mut draws = 0;
        while bundles.len() < batch && draws < budget {
            draws += 1;
            let view = rng.gen_range(0..images.len());
            let img = &images[view];
            let u0 = rng.gen_range(0..=img.pixels.width - p);
            let v0 = rng.gen_range(0..=img.pixels.height - p);
            let keep = match self.peak_opacity(view, u0, v0) {
                None => true,
                Some(peak) => {
                    let lucky = rng.gen::<f64>() < self.mask.keep_bg;
                    peak >= self.mask.tau || lucky
                }
            };
            if keep {
                bundles.push(PatchBundle::new(img, view, u0, v0, p, self.scale)?);
            }
        }
        let short = bundles.len() < batch;
        Ok(PatchSample { bundles, short, draws })
    }
}

/// Build a sampler and draw one batch.
#[allow(clippy::too_many_arguments)]
pub fn sample_patch_bundles<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    images: &[PosedImage],
    coarse: Option<&F>,
    p: usize,
    s: usize,
    batch: usize,
    mask: MaskConfig,
    samples: usize,
    rng: &mut R,
) -> Result<PatchSample> {
    PatchSampler::new(images, coarse, p, s, mask, samples)?.sample(images, batch, rng)
}
