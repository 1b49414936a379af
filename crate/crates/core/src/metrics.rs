//! Image quality metrics and a multi-view consistency probe.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{config_err, shape_err, Result};
use crate::field::{FieldScratch, RadianceField};
use crate::image::Image;
use crate::math::Vec3;
use crate::render::{trace_ray, RenderOptions};

/// `10·log₁₀(1/MSE)` over all channels; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(1.0 / mse))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filtering of a single-channel image.
fn gaussian_valid(img: &Image, k: &[f64; SSIM_WINDOW]) -> Image {
    let n = SSIM_WINDOW;
    let tmp = Image::from_fn(img.width - n + 1, img.height, 1, |y, x, _| {
        (0..n).map(|i| k[i] * img.at(y, x + i, 0)).sum()
    });
    Image::from_fn(tmp.width, img.height - n + 1, 1, |y, x, _| (0..n).map(|i| k[i] * tmp.at(y + i, x, 0)).sum())
}

/// Mean SSIM of the luminance channels over all full 11×11 Gaussian windows
/// (σ = 1.5, k₁ = 0.01, k₂ = 0.03, dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(shape_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"));
    }
    let (la, lb) = if a.channels == 3 { (a.luminance(), b.luminance()) } else { (a.clone(), b.clone()) };
    let k = ssim_kernel();
    let prod = |x: &Image, y: &Image| Image {
        data: x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
        ..x.clone()
    };
    let mu_a = gaussian_valid(&la, &k);
    let mu_b = gaussian_valid(&lb, &k);
    let e_aa = gaussian_valid(&prod(&la, &la), &k);
    let e_bb = gaussian_valid(&prod(&lb, &lb), &k);
    let e_ab = gaussian_valid(&prod(&la, &lb), &k);
    let mut total = 0.0;
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = e_aa.data[i] - ma * ma;
        let vb = e_bb.data[i] - mb * mb;
        let cov = e_ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.data.len() as f64)
}

/// Per-view and mean quality numbers for a set of rendered views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub view_ids: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub runtime_seconds: f64,
    pub config_digest: String,
}

impl MetricReport {
    pub fn new(
        view_ids: Vec<String>,
        psnr: Vec<f64>,
        ssim: Vec<f64>,
        runtime_seconds: f64,
        config_digest: String,
    ) -> Result<Self> {
        if psnr.is_empty() {
            return Err(config_err!("metric report needs at least one view"));
        }
        if psnr.len() != ssim.len() || psnr.len() != view_ids.len() {
            return Err(shape_err!("per-view metric lists differ in length"));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(MetricReport {
            mean_psnr: mean(&psnr),
            mean_ssim: mean(&ssim),
            view_ids,
            psnr,
            ssim,
            runtime_seconds,
            config_digest,
        })
    }
}

/// Across-view color variance of probe points.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Per probe point, the mean over RGB of the population variance across the
    /// views that see it; `None` when fewer than two views see it.
    pub variances: Vec<Option<f64>>,
    pub skipped: usize,
}

impl ProbeResult {
    pub fn mean_variance(&self) -> Option<f64> {
        let seen: Vec<f64> = self.variances.iter().flatten().copied().collect();
        (!seen.is_empty()).then(|| seen.iter().sum::<f64>() / seen.len() as f64)
    }
}

/// Relative depth mismatch beyond which a probe point counts as occluded.
pub const PROBE_DEPTH_TOL: f64 = 0.05;

/// Render the pixel containing each probe point in every pose and measure how
/// much its color varies across the views where the pixel ray is opaque (≥ 0.5)
/// and ends near the point.
pub fn consistency_probe<F: RadianceField + ?Sized>(
    field: &F,
    poses: &[CameraPose],
    points: &[Vec3],
    opts: &RenderOptions,
) -> Result<ProbeResult> {
    if poses.len() < 2 {
        return Err(config_err!("consistency probe needs at least two poses, got {}", poses.len()));
    }
    let mut scratch = FieldScratch::default();
    let mut variances = Vec::with_capacity(points.len());
    let mut skipped = 0;
    for &p in points {
        let mut colors: Vec<[f64; 3]> = vec![];
        for pose in poses {
            let Some((u, v)) = pose.project(p) else { continue };
            if u < 0.0 || v < 0.0 || u >= pose.width as f64 || v >= pose.height as f64 {
                continue;
            }
            let (px, py) = (libm::floor(u), libm::floor(v));
            let ray = pose.ray_through(px + 0.5, py + 0.5);
            let out = trace_ray::<F, rand_chacha::ChaCha8Rng>(field, &ray, opts, None, &mut scratch).out;
            let dist = (p - pose.origin()).norm();
            // An occluder in front of the point shows up as a shorter depth.
            if out.opacity >= 0.5 && (out.depth - dist).abs() <= PROBE_DEPTH_TOL * dist {
                colors.push(out.rgb);
            }
        }
        if colors.len() < 2 {
            skipped += 1;
            variances.push(None);
            continue;
        }
        let n = colors.len() as f64;
        let mut var = 0.0;
        for c in 0..3 {
            let mean = colors.iter().map(|x| x[c]).sum::<f64>() / n;
            var += colors.iter().map(|x| (x[c] - mean) * (x[c] - mean)).sum::<f64>() / n;
        }
        variances.push(Some(var / 3.0));
    }
    Ok(ProbeResult { variances, skipped })
}
