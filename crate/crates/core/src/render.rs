//! Ray marching and alpha compositing.
//!
//! A ray is cut into `K` strata between `near` and `far`; each stratum holds one
//! sample. With densities `σ_i` and step sizes `Δ_i`, sample `i` receives weight
//! `w_i = T_i (1 − e^{−σ_i Δ_i})` where `T_i = e^{−Σ_{j<i} σ_j Δ_j}`, and the pixel
//! is `Σ w_i c_i + (1 − Σ w_i) · background`.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{gen_rays, CameraPose, Ray};
use crate::error::{config_err, Error, Result};
use crate::field::{FieldConfig, FieldParams, FieldScratch, RadianceField, TensorialField};
use crate::image::Image;
use crate::math::Vec3;
use crate::patch::PatchBundle;

/// Lower bound on accumulated opacity when normalizing expected depth.
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Samples per ray.
    pub samples: usize,
    pub background: [f64; 3],
    /// Colors are only decoded for samples whose weight exceeds this value; the
    /// others contribute zero color.
    pub weight_threshold: f64,
    /// Stop marching once transmittance drops below this value.
    pub min_transmittance: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { samples: 128, background: [1.0; 3], weight_threshold: 1e-4, min_transmittance: 1e-4 }
    }
}

impl RenderOptions {
    /// Options that evaluate every sample, used where exact gradients matter.
    pub fn exact(samples: usize, background: [f64; 3]) -> Self {
        RenderOptions { samples, background, weight_threshold: 0.0, min_transmittance: 0.0 }
    }
}

/// Sample positions along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamplePack {
    pub depths: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f64>,
    pub valid: Vec<bool>,
}

/// `K` stratified depths in `[near, far]`: one uniform draw per stratum, or the
/// stratum midpoint when `rng` is `None`. `Δ_i = t_{i+1} − t_i` and the last step is
/// `(far − near)/K`. Samples outside `cfg`'s bounds are flagged invalid.
pub fn stratified_samples<R: Rng + ?Sized>(
    ray: &Ray,
    near: f64,
    far: f64,
    k: usize,
    cfg: &FieldConfig,
    mut rng: Option<&mut R>,
) -> Result<RaySamplePack> {
    if !(near < far) {
        return Err(config_err!("near ({near}) must be below far ({far})"));
    }
    if k < 2 {
        return Err(config_err!("need at least 2 samples per ray, got {k}"));
    }
    let step = (far - near) / k as f64;
    let depths: Vec<f64> = (0..k)
        .map(|i| {
            let u = match rng.as_deref_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            near + (i as f64 + u) * step
        })
        .collect();
    let deltas = (0..k).map(|i| if i + 1 < k { depths[i + 1] - depths[i] } else { step }).collect();
    let positions: Vec<Vec3> = depths.iter().map(|&t| ray.at(t)).collect();
    let valid = positions.iter().map(|&p| cfg.contains(p)).collect();
    Ok(RaySamplePack { depths, positions, deltas, valid })
}

/// Output of compositing one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
}

/// Per-sample weights and the transmittance left after the last sample.
pub fn compositing_weights(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut optical = 0.0;
    let mut trans = 1.0;
    for (s, d) in sigmas.iter().zip(deltas) {
        optical += s * d;
        let next = libm::exp(-optical);
        weights.push(trans - next);
        trans = next;
    }
    (weights, trans)
}

fn check_composite_inputs(sigmas: &[f64], colors: &[[f64; 3]], deltas: &[f64]) -> Result<()> {
    if sigmas.len() != colors.len() || sigmas.len() != deltas.len() {
        return Err(Error::Shape("sigma, color and delta counts differ".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(alloc::format!("density must be non-negative, got {s}")));
    }
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Domain("step sizes must be positive".into()));
    }
    Ok(())
}

/// Alpha-composite samples front to back over `background`.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    depths: &[f64],
    background: [f64; 3],
) -> Result<Composite> {
    check_composite_inputs(sigmas, colors, deltas)?;
    let (weights, t_end) = compositing_weights(sigmas, deltas);
    Ok(finish_composite(&weights, t_end, colors, depths, background))
}

fn finish_composite(
    weights: &[f64],
    t_end: f64,
    colors: &[[f64; 3]],
    depths: &[f64],
    background: [f64; 3],
) -> Composite {
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    for (i, w) in weights.iter().enumerate() {
        for k in 0..3 {
            rgb[k] += w * colors[i][k];
        }
        depth += w * depths[i];
    }
    let opacity = 1.0 - t_end;
    for k in 0..3 {
        rgb[k] += t_end * background[k];
    }
    Composite { rgb, opacity, depth: depth / opacity.max(DEPTH_EPS) }
}

/// Vector-Jacobian product of [`composite`] for the `rgb` and `opacity` outputs.
pub fn composite_backward(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    background: [f64; 3],
    d_rgb: [f64; 3],
    d_opacity: f64,
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    check_composite_inputs(sigmas, colors, deltas)?;
    let (weights, t_end) = compositing_weights(sigmas, deltas);
    Ok(composite_backward_with(&weights, t_end, sigmas, colors, deltas, background, d_rgb, d_opacity))
}

#[allow(clippy::too_many_arguments)]
fn composite_backward_with(
    weights: &[f64],
    t_end: f64,
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    background: [f64; 3],
    d_rgb: [f64; 3],
    d_opacity: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = sigmas.len();
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    // ∂rgb/∂σ_k = Δ_k (T_{k+1} c_k − Σ_{i>k} w_i c_i − T_end · bg)
    let bg_term: f64 = (0..3).map(|k| d_rgb[k] * background[k]).sum::<f64>() * t_end;
    let mut trans_after = vec![0.0; n];
    let mut trans = 1.0;
    for i in 0..n {
        trans -= weights[i];
        trans_after[i] = trans;
    }
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let c: f64 = (0..3).map(|k| d_rgb[k] * colors[i][k]).sum();
        d_sigma[i] = deltas[i] * (trans_after[i] * c - suffix - bg_term + d_opacity * t_end);
        suffix += weights[i] * c;
        for k in 0..3 {
            d_color[i][k] = weights[i] * d_rgb[k];
        }
    }
    (d_sigma, d_color)
}

/// Parametric interval where `ray` is inside the axis-aligned box.
fn box_interval(ray: &Ray, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let d = ray.dir[a];
        if d.abs() < 1e-15 {
            if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - ray.origin[a]) / d, (hi[a] - ray.origin[a]) / d);
        if ta > tb {
            core::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Samples of one ray that can have non-zero density, with their step sizes.
///
/// Strata are generated exactly as in [`stratified_samples`]; strata that cannot
/// reach the scene box are skipped without drawing random numbers for them.
fn inside_samples<R: Rng + ?Sized>(
    ray: &Ray,
    cfg: &FieldConfig,
    k: usize,
    rng: &mut Option<&mut R>,
    out: &mut Vec<(f64, f64, Vec3)>,
) {
    out.clear();
    let (near, far) = (cfg.near, cfg.far);
    let step = (far - near) / k as f64;
    let Some((b0, b1)) = box_interval(ray, cfg.bounds_min, cfg.bounds_max) else {
        return;
    };
    if b1 < near || b0 > far {
        return;
    }
    let first = (libm::floor((b0 - near) / step).max(0.0) as usize).min(k - 1);
    let last = (libm::floor((b1 - near) / step).max(0.0) as usize).min(k - 1);
    // One stratum past the box is drawn so the last step matches `stratified_samples`.
    let end = (last + 1).min(k - 1);
    let mut depths = Vec::with_capacity(end - first + 1);
    for i in first..=end {
        let u = match rng.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        depths.push(near + (i as f64 + u) * step);
    }
    for j in 0..=(last - first) {
        let t = depths[j];
        let delta = if first + j + 1 < k { depths[j + 1] - t } else { step };
        let x = ray.at(t);
        if cfg.contains(x) {
            out.push((t, delta, x));
        }
    }
}

/// Forward record of one ray, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct RayTrace {
    ray_dir: Vec3,
    positions: Vec<Vec3>,
    depths: Vec<f64>,
    deltas: Vec<f64>,
    sigmas: Vec<f64>,
    colors: Vec<[f64; 3]>,
    decoded: Vec<bool>,
    weights: Vec<f64>,
    t_end: f64,
    pub out: Composite,
}

impl Default for Composite {
    fn default() -> Self {
        Composite { rgb: [0.0; 3], opacity: 0.0, depth: 0.0 }
    }
}

/// March one ray through `field`, returning the composite and (optionally) the
/// trace needed for gradients.
pub fn trace_ray<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    ray: &Ray,
    opts: &RenderOptions,
    mut rng: Option<&mut R>,
    scratch: &mut FieldScratch,
) -> RayTrace {
    let cfg = field.config();
    let mut samples = Vec::new();
    inside_samples(ray, cfg, opts.samples, &mut rng, &mut samples);
    let mut tr = RayTrace { ray_dir: ray.dir, ..Default::default() };
    let mut optical = 0.0;
    let mut trans = 1.0;
    for &(t, delta, x) in &samples {
        if trans < opts.min_transmittance {
            break;
        }
        let sigma = field.density(x);
        optical += sigma * delta;
        let next = libm::exp(-optical);
        tr.positions.push(x);
        tr.depths.push(t);
        tr.deltas.push(delta);
        tr.sigmas.push(sigma);
        tr.weights.push(trans - next);
        trans = next;
    }
    tr.t_end = trans;
    let n = tr.positions.len();
    tr.colors = vec![[0.0; 3]; n];
    tr.decoded = vec![false; n];
    for i in 0..n {
        if tr.weights[i] > opts.weight_threshold || opts.weight_threshold == 0.0 {
            tr.colors[i] = field.color(tr.positions[i], ray.dir, scratch);
            tr.decoded[i] = true;
        }
    }
    tr.out = finish_composite(&tr.weights, tr.t_end, &tr.colors, &tr.depths, opts.background);
    tr
}

impl RayTrace {
    /// Accumulate parameter gradients for `∂L/∂rgb` (and `∂L/∂opacity`).
    pub fn backward(
        &self,
        field: &TensorialField,
        background: [f64; 3],
        d_rgb: [f64; 3],
        d_opacity: f64,
        grads: &mut FieldParams,
        scratch: &mut FieldScratch,
    ) {
        if self.positions.is_empty() {
            return;
        }
        let (d_sigma, d_color) = composite_backward_with(
            &self.weights,
            self.t_end,
            &self.sigmas,
            &self.colors,
            &self.deltas,
            background,
            d_rgb,
            d_opacity,
        );
        for i in 0..self.positions.len() {
            let dc = self.decoded[i].then_some(d_color[i]);
            field.backward_sample(self.positions[i], self.ray_dir, d_sigma[i], dc, grads, scratch);
        }
    }
}

/// Render one ray without keeping gradients.
pub fn render_ray<F: RadianceField + ?Sized>(field: &F, ray: &Ray, opts: &RenderOptions, scratch: &mut FieldScratch) -> Composite {
    trace_ray::<F, rand_chacha::ChaCha8Rng>(field, ray, opts, None, scratch).out
}

/// Accumulated opacity along a ray (density only, no color decoding).
pub fn ray_opacity<F: RadianceField + ?Sized>(field: &F, ray: &Ray, samples: usize) -> f64 {
    let cfg = field.config();
    let mut pts = Vec::new();
    inside_samples::<rand_chacha::ChaCha8Rng>(ray, cfg, samples, &mut None, &mut pts);
    let optical: f64 = pts.iter().map(|&(_, d, x)| field.density(x) * d).sum();
    1.0 - libm::exp(-optical)
}

/// A rendered `q×q` patch.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPatch {
    pub rgb: Image,
    pub opacity: Image,
    pub depth: Image,
}

/// Render every ray of a patch bundle; the output is `(s·p) × (s·p)`.
pub fn render_patch<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    bundle: &PatchBundle,
    opts: &RenderOptions,
    mut rng: Option<&mut R>,
) -> RenderedPatch {
    let q = bundle.hr_size();
    let mut rgb = Image::new(q, q, 3);
    let mut opacity = Image::new(q, q, 1);
    let mut depth = Image::new(q, q, 1);
    let mut scratch = FieldScratch::default();
    for (i, ray) in bundle.rays.iter().enumerate() {
        let out = trace_ray(field, ray, opts, rng.as_deref_mut(), &mut scratch).out;
        let (y, x) = (i / q, i % q);
        for c in 0..3 {
            *rgb.at_mut(y, x, c) = out.rgb[c];
        }
        *opacity.at_mut(y, x, 0) = out.opacity;
        *depth.at_mut(y, x, 0) = out.depth;
    }
    RenderedPatch { rgb, opacity, depth }
}

/// Full-frame render at `s×` the pose resolution, evaluated `chunk` rays at a time.
/// Returns the RGB image and the expected-depth map.
pub fn render_image<F: RadianceField + ?Sized>(
    field: &F,
    pose: &CameraPose,
    s: usize,
    opts: &RenderOptions,
    chunk: usize,
) -> Result<(Image, Image)> {
    let rays = gen_rays(pose, s)?;
    let (w, h) = (pose.width * s, pose.height * s);
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut scratch = FieldScratch::default();
    for (c, block) in rays.chunks(chunk.max(1)).enumerate() {
        for (j, ray) in block.iter().enumerate() {
            let i = c * chunk.max(1) + j;
            let out = render_ray(field, ray, opts, &mut scratch);
            for k in 0..3 {
                rgb.data[i * 3 + k] = out.rgb[k];
            }
            depth.data[i] = out.depth;
        }
    }
    Ok((rgb, depth))
}
