//! Stage orchestration: coarse fitting, degradation-network internal learning
//! and supervised fine training with snapshot capture.

use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::features::{perceptual_terms, FeatureExtractor};
use crate::field::{EnsembleField, FieldConfig, FieldParams, FieldScratch, FieldSnapshot, GridRegularizer, TensorialField};
use crate::image::{Image, PosedImage};
use crate::optim::{decayed_lr, Adam, AdamConfig, ParamGroup, ParamSet};
use crate::patch::{MaskConfig, PatchBundle, PatchSampler};
use crate::render::{render_ray, trace_ray, RayTrace, RenderOptions};
use crate::rng::stream;
use crate::sdm::{SdmConfig, SdmNetwork, SdmTrace};

/// Capture source for the published hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Object-centric 360° captures.
    Synthetic,
    /// Forward-facing real captures.
    ForwardFacing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Super-resolution factor.
    pub scale: usize,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub sdm_steps: usize,
    /// Weight of the perceptual term.
    pub lambda: f64,
    pub lr_grid: f64,
    pub lr_decoder: f64,
    pub lr_sdm: f64,
    /// Every learning rate decays exponentially to this fraction over its stage.
    pub lr_final_ratio: f64,
    /// Side of a patch at the resolution the degradation network consumes.
    pub patch_size: usize,
    /// Patch bundles per fine step.
    pub batch_patches: usize,
    /// Patches per degradation-network step.
    pub sdm_batch: usize,
    /// Rays per coarse step.
    pub batch_rays: usize,
    /// Upper bound on rays per fine step.
    pub fine_ray_budget: usize,
    pub snapshot_every: usize,
    pub snapshot_count: usize,
    /// Samples per ray while training.
    pub samples: usize,
    /// Samples per ray for evaluation renders.
    pub eval_samples: usize,
    pub mask: MaskConfig,
    pub background: [f64; 3],
    pub seed: u64,
    pub extractor_seed: u64,
    pub field: FieldConfig,
    pub sdm: SdmConfig,
    /// Grid penalties added to the coarse and fine losses.
    #[serde(default)]
    pub regularizer: GridRegularizer,
}

impl TrainConfig {
    /// Published full-scale hyperparameters.
    pub fn full(scale: usize, kind: DatasetKind) -> Self {
        let (coarse_steps, fine_steps) = match kind {
            DatasetKind::Synthetic => (5000, 25000),
            DatasetKind::ForwardFacing => (10000, 20000),
        };
        let (patch_size, batch_patches) = if scale >= 4 { (32, 8) } else { (16, 32) };
        TrainConfig {
            scale,
            coarse_steps,
            fine_steps,
            sdm_steps: 10000,
            lambda: 0.03,
            lr_grid: 0.02,
            lr_decoder: 0.001,
            lr_sdm: 0.001,
            lr_final_ratio: 0.1,
            patch_size,
            batch_patches,
            sdm_batch: batch_patches,
            batch_rays: 4096,
            fine_ray_budget: 8192,
            snapshot_every: 1000,
            snapshot_count: 3,
            samples: 128,
            eval_samples: 128,
            mask: MaskConfig::default(),
            background: [1.0; 3],
            seed: 0,
            extractor_seed: 0x5eed,
            field: FieldConfig::default(),
            sdm: SdmConfig { scale: scale.max(2), ..SdmConfig::default() },
            regularizer: GridRegularizer::default(),
        }
    }

    /// CPU-sized profile for 8 views at 64×64 and ×2.
    pub fn desk() -> Self {
        Self::desk_at(2)
    }

    /// CPU-sized profile at `scale` (2 or 4), with the published patch sizes.
    pub fn desk_at(scale: usize) -> Self {
        let field = FieldConfig {
            grid_res: 64,
            density_rank: 8,
            appearance_rank: 12,
            appearance_dim: 16,
            hidden_width: 64,
            hidden_layers: 1,
            ..FieldConfig::default()
        };
        TrainConfig {
            coarse_steps: 2000,
            fine_steps: 4000,
            sdm_steps: 2000,
            batch_patches: 2,
            sdm_batch: 8,
            batch_rays: 512,
            snapshot_every: 250,
            samples: 64,
            eval_samples: 96,
            field,
            ..TrainConfig::full(scale, DatasetKind::Synthetic)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.scale) {
            return Err(config_err!("scale must be 1, 2 or 4, got {}", self.scale));
        }
        if !(self.lambda >= 0.0) {
            return Err(config_err!("lambda must be non-negative"));
        }
        let counts = [
            ("coarse_steps", self.coarse_steps),
            ("fine_steps", self.fine_steps),
            ("sdm_steps", self.sdm_steps),
            ("patch_size", self.patch_size),
            ("batch_patches", self.batch_patches),
            ("sdm_batch", self.sdm_batch),
            ("batch_rays", self.batch_rays),
            ("fine_ray_budget", self.fine_ray_budget),
            ("snapshot_every", self.snapshot_every),
            ("snapshot_count", self.snapshot_count),
            ("samples", self.samples),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config_err!("{name} must be at least 1"));
            }
        }
        if self.patch_size % self.scale != 0 {
            return Err(config_err!("patch_size {} is not divisible by scale {}", self.patch_size, self.scale));
        }
        if (self.snapshot_count - 1) * self.snapshot_every > self.fine_steps {
            return Err(config_err!("snapshot schedule starts before step 0"));
        }
        for lr in [self.lr_grid, self.lr_decoder, self.lr_sdm, self.lr_final_ratio] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(config_err!("learning rates and decay ratio must be positive"));
            }
        }
        self.field.validate()?;
        if self.scale > 1 {
            if self.sdm.scale != self.scale {
                return Err(config_err!("degradation network scale {} differs from {}", self.sdm.scale, self.scale));
            }
            self.sdm.validate()?;
        }
        Ok(())
    }

    /// Fine steps that capture a snapshot, in increasing order and ending at `fine_steps`.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        (0..self.snapshot_count).map(|k| self.fine_steps - (self.snapshot_count - 1 - k) * self.snapshot_every).collect()
    }

    /// Bundles per fine step after applying the ray budget.
    pub fn fine_bundles(&self) -> usize {
        let rays_per_bundle = self.patch_size * self.patch_size;
        self.batch_patches.min(self.fine_ray_budget / rays_per_bundle).max(1)
    }

    pub fn train_options(&self) -> RenderOptions {
        RenderOptions { samples: self.samples, background: self.background, ..RenderOptions::default() }
    }

    pub fn eval_options(&self) -> RenderOptions {
        RenderOptions { samples: self.eval_samples, background: self.background, ..RenderOptions::default() }
    }

    fn field_lr(&self, step: usize, total: usize) -> impl Fn(ParamGroup) -> f64 {
        let grid = decayed_lr(self.lr_grid, step, total, self.lr_final_ratio);
        let net = decayed_lr(self.lr_decoder, step, total, self.lr_final_ratio);
        move |g| match g {
            ParamGroup::Grid => grid,
            ParamGroup::Network => net,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Sdm,
    Fine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Sdm => "sdm",
            Stage::Fine => "fine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    /// 1-based step index.
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub perc: f64,
}

/// Receives every loss record as training progresses.
pub type Observer<'a> = &'a mut dyn FnMut(&LossRecord);

fn guard(stage: Stage, step: usize, loss: f64, finite_params: bool) -> Result<()> {
    if loss.is_finite() && finite_params {
        Ok(())
    } else {
        Err(Error::Divergence { stage: stage.name(), step, loss })
    }
}

fn check_images(images: &[PosedImage]) -> Result<()> {
    if images.is_empty() {
        return Err(config_err!("no training images"));
    }
    Ok(())
}

/// Fit `field` to the training pixels with random ray batches.
pub fn train_coarse(
    field: &mut TensorialField,
    images: &[PosedImage],
    cfg: &TrainConfig,
    observer: Observer<'_>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_images(images)?;
    let mut rng = stream(cfg.seed, 1);
    let mut adam = Adam::new(&field.params, AdamConfig::default());
    let mut grads = field.zero_grads();
    let mut scratch = FieldScratch::default();
    let opts = cfg.train_options();
    let mut curve = Vec::with_capacity(cfg.coarse_steps);
    let norm = 1.0 / (3 * cfg.batch_rays) as f64;
    for step in 1..=cfg.coarse_steps {
        grads.zero();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_rays {
            let img = &images[rng.gen_range(0..images.len())];
            let x = rng.gen_range(0..img.pixels.width);
            let y = rng.gen_range(0..img.pixels.height);
            let ray = img.pose.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            let tr = trace_ray(&*field, &ray, &opts, Some(&mut rng), &mut scratch);
            let gt = img.pixels.pixel(y, x);
            let mut d_rgb = [0.0; 3];
            for c in 0..3 {
                let diff = tr.out.rgb[c] - gt[c];
                loss += diff * diff * norm;
                d_rgb[c] = 2.0 * diff * norm;
            }
            tr.backward(field, cfg.background, d_rgb, 0.0, &mut grads, &mut scratch);
        }
        let mse = loss;
        loss += cfg.regularizer.apply(&field.params, Some(&mut grads));
        adam.step(&mut field.params, &grads, cfg.field_lr(step - 1, cfg.coarse_steps));
        guard(Stage::Coarse, step, loss, field.params.all_finite())?;
        let rec = LossRecord { stage: Stage::Coarse, step, total: loss, mse, perc: 0.0 };
        observer(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

/// Render every training view of `field` at its own resolution with midpoint sampling.
pub fn render_views(field: &TensorialField, images: &[PosedImage], opts: &RenderOptions) -> Vec<Image> {
    let mut scratch = FieldScratch::default();
    images
        .iter()
        .map(|img| {
            let pose = &img.pose;
            let mut out = Image::new(pose.width, pose.height, 3);
            for y in 0..pose.height {
                for x in 0..pose.width {
                    let c = render_ray(field, &pose.ray_through(x as f64 + 0.5, y as f64 + 0.5), opts, &mut scratch);
                    for k in 0..3 {
                        *out.at_mut(y, x, k) = c.rgb[k];
                    }
                }
            }
            out
        })
        .collect()
}

/// Learn the degradation from coarse renders of the training views to the box
/// downsampled ground truth. Returns the network and its loss curve.
pub fn train_sdm(
    coarse: &TensorialField,
    images: &[PosedImage],
    cfg: &TrainConfig,
    observer: Observer<'_>,
) -> Result<(SdmNetwork, Vec<LossRecord>)> {
    cfg.validate()?;
    check_images(images)?;
    let s = cfg.scale;
    if s == 1 {
        return Err(config_err!("degradation network needs scale 2 or 4"));
    }
    let p = cfg.patch_size;
    for img in images {
        if img.pixels.width < p || img.pixels.height < p || img.pixels.width % s != 0 || img.pixels.height % s != 0 {
            return Err(shape_err!(
                "training view {}x{} cannot hold aligned {p}x{p} patches at scale {s}",
                img.pixels.width,
                img.pixels.height
            ));
        }
    }
    let renders = render_views(coarse, images, &cfg.train_options());
    let targets: Vec<Image> = images.iter().map(|img| img.pixels.box_downsample(s)).collect::<Result<_>>()?;
    let mut net = SdmNetwork::init(cfg.sdm.clone(), cfg.seed.wrapping_add(0x5d))?;
    let mut grads = net.zeros_like();
    let mut adam = Adam::new(&net, AdamConfig::default());
    let mut rng = stream(cfg.seed, 2);
    let mut curve = Vec::with_capacity(cfg.sdm_steps);
    let q = p / s;
    for step in 1..=cfg.sdm_steps {
        grads.zero();
        let mut loss = 0.0;
        for _ in 0..cfg.sdm_batch {
            let v = rng.gen_range(0..images.len());
            let (w, h) = (images[v].pixels.width, images[v].pixels.height);
            let u0 = s * rng.gen_range(0..=(w - p) / s);
            let v0 = s * rng.gen_range(0..=(h - p) / s);
            let input = renders[v].crop(u0, v0, p, p)?;
            let target = targets[v].crop(u0 / s, v0 / s, q, q)?;
            let trace = net.forward_trace(&input)?;
            let n = (target.data.len() * cfg.sdm_batch) as f64;
            let mut d_out = trace.output.clone();
            for (g, t) in d_out.data.iter_mut().zip(&target.data) {
                let diff = *g - t;
                loss += diff * diff / n;
                *g = 2.0 * diff / n;
            }
            net.backward(&trace, &d_out, Some(&mut grads));
        }
        let lr = decayed_lr(cfg.lr_sdm, step - 1, cfg.sdm_steps, cfg.lr_final_ratio);
        adam.step(&mut net, &grads, |_| lr);
        net.project();
        guard(Stage::Sdm, step, loss, net.all_finite())?;
        let rec = LossRecord { stage: Stage::Sdm, step, total: loss, mse: loss, perc: 0.0 };
        observer(&rec);
        curve.push(rec);
    }
    Ok((net, curve))
}

/// Map from a rendered high-resolution patch to the ground-truth resolution.
#[derive(Clone, Copy, Debug)]
pub enum Supervisor<'a> {
    /// Learned degradation network (kept frozen).
    Sdm(&'a SdmNetwork),
    /// Plain `s×s` box averaging.
    Box(usize),
}

#[derive(Debug)]
enum SupervisorTrace {
    Sdm(SdmTrace),
    Box,
}

impl Supervisor<'_> {
    pub fn scale(&self) -> usize {
        match self {
            Supervisor::Sdm(net) => net.config.scale,
            Supervisor::Box(s) => *s,
        }
    }

    pub fn apply(&self, hr: &Image) -> Result<Image> {
        Ok(self.forward(hr)?.0)
    }

    fn forward(&self, hr: &Image) -> Result<(Image, SupervisorTrace)> {
        match self {
            Supervisor::Sdm(net) => {
                let tr = net.forward_trace(hr)?;
                Ok((tr.output.clone(), SupervisorTrace::Sdm(tr)))
            }
            Supervisor::Box(s) => Ok((hr.box_downsample(*s)?, SupervisorTrace::Box)),
        }
    }

    fn backward(&self, trace: &SupervisorTrace, d_out: &Image) -> Image {
        match (self, trace) {
            (Supervisor::Sdm(net), SupervisorTrace::Sdm(tr)) => net.backward(tr, d_out, None),
            _ => Image::box_downsample_backward(d_out, self.scale()),
        }
    }
}

/// Loss of one fine step, averaged over the bundles.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FineLoss {
    pub total: f64,
    pub mse: f64,
    pub perc: f64,
}

/// Render every bundle, map it through `supervisor` and compare with the
/// ground-truth patch: `total = mse + λ·perc`. When `grads` is given the
/// gradient with respect to the field parameters is accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn fine_loss<E: FeatureExtractor + ?Sized, R: Rng + ?Sized>(
    bundles: &[PatchBundle],
    field: &TensorialField,
    supervisor: Supervisor<'_>,
    extractor: &E,
    lambda: f64,
    opts: &RenderOptions,
    mut rng: Option<&mut R>,
    mut grads: Option<&mut FieldParams>,
) -> Result<FineLoss> {
    if bundles.is_empty() {
        return Err(config_err!("fine loss needs at least one bundle"));
    }
    let mut scratch = FieldScratch::default();
    let mut acc = FineLoss::default();
    let inv_b = 1.0 / bundles.len() as f64;
    for bundle in bundles {
        if bundle.scale != supervisor.scale() {
            return Err(shape_err!("bundle scale {} differs from supervisor scale {}", bundle.scale, supervisor.scale()));
        }
        let q = bundle.hr_size();
        let mut traces: Vec<RayTrace> = Vec::with_capacity(bundle.rays.len());
        let mut hr = Image::new(q, q, 3);
        for (i, ray) in bundle.rays.iter().enumerate() {
            let tr = trace_ray(field, ray, opts, rng.as_deref_mut(), &mut scratch);
            hr.data[3 * i..3 * i + 3].copy_from_slice(&tr.out.rgb);
            traces.push(tr);
        }
        let (lhr, sup_trace) = supervisor.forward(&hr)?;
        if !lhr.same_shape(&bundle.gt_patch) {
            return Err(shape_err!(
                "supervised patch {}x{} does not match ground truth {}x{}",
                lhr.width,
                lhr.height,
                bundle.gt_patch.width,
                bundle.gt_patch.height
            ));
        }
        let n = lhr.data.len() as f64;
        let mut d_lhr = lhr.clone();
        let mut mse = 0.0;
        for (g, t) in d_lhr.data.iter_mut().zip(&bundle.gt_patch.data) {
            let diff = *g - t;
            mse += diff * diff / n;
            *g = 2.0 * diff / n;
        }
        let (perc, d_feat) = if lambda > 0.0 {
            perceptual_terms(extractor, &lhr, &bundle.gt_patch)?
        } else {
            (0.0, Vec::new())
        };
        acc.mse += mse * inv_b;
        acc.perc += perc * inv_b;
        let Some(grads) = grads.as_deref_mut() else { continue };
        if lambda > 0.0 {
            let d_perc = extractor.backward(&lhr, &d_feat)?;
            d_lhr.data.iter_mut().zip(&d_perc.data).for_each(|(a, b)| *a += lambda * b);
        }
        d_lhr.data.iter_mut().for_each(|v| *v *= inv_b);
        let d_hr = supervisor.backward(&sup_trace, &d_lhr);
        for (i, tr) in traces.iter().enumerate() {
            let d = [d_hr.data[3 * i], d_hr.data[3 * i + 1], d_hr.data[3 * i + 2]];
            tr.backward(field, opts.background, d, 0.0, grads, &mut scratch);
        }
    }
    acc.total = acc.mse + lambda * acc.perc;
    Ok(acc)
}

/// Result of the fine stage.
#[derive(Clone, Debug)]
pub struct FineOutcome {
    pub field: TensorialField,
    pub ensemble: EnsembleField,
    pub curve: Vec<LossRecord>,
}

/// Warm-start from `coarse` and train against supervised patches.
pub fn train_fine<E: FeatureExtractor + ?Sized>(
    coarse: &TensorialField,
    supervisor: Supervisor<'_>,
    extractor: &E,
    images: &[PosedImage],
    cfg: &TrainConfig,
    observer: Observer<'_>,
) -> Result<FineOutcome> {
    cfg.validate()?;
    check_images(images)?;
    if cfg.scale == 1 || supervisor.scale() != cfg.scale {
        return Err(config_err!("fine stage needs a supervisor at scale {} > 1", cfg.scale));
    }
    let p = cfg.patch_size / cfg.scale;
    let sampler = PatchSampler::new(images, Some(coarse), p, cfg.scale, cfg.mask, cfg.samples)?;
    let mut field = coarse.clone();
    let mut adam = Adam::new(&field.params, AdamConfig::default());
    let mut grads = field.zero_grads();
    let mut rng = stream(cfg.seed, 3);
    let opts = cfg.train_options();
    let batch = cfg.fine_bundles();
    let schedule = cfg.snapshot_steps();
    let mut snapshots = Vec::with_capacity(schedule.len());
    if schedule.first() == Some(&0) {
        snapshots.push(FieldSnapshot::new(0, field.clone()));
    }
    let mut curve = Vec::with_capacity(cfg.fine_steps);
    for step in 1..=cfg.fine_steps {
        let sample = sampler.sample(images, batch, &mut rng)?;
        grads.zero();
        let mut loss = if sample.bundles.is_empty() {
            FineLoss::default()
        } else {
            fine_loss(&sample.bundles, &field, supervisor, extractor, cfg.lambda, &opts, Some(&mut rng), Some(&mut grads))?
        };
        loss.total += cfg.regularizer.apply(&field.params, Some(&mut grads));
        adam.step(&mut field.params, &grads, cfg.field_lr(step - 1, cfg.fine_steps));
        guard(Stage::Fine, step, loss.total, field.params.all_finite())?;
        let rec = LossRecord { stage: Stage::Fine, step, total: loss.total, mse: loss.mse, perc: loss.perc };
        observer(&rec);
        curve.push(rec);
        if schedule.contains(&step) {
            snapshots.push(FieldSnapshot::new(step, field.clone()));
        }
    }
    let ensemble = EnsembleField::new(snapshots)?;
    Ok(FineOutcome { field, ensemble, curve })
}

/// Mean loss over the first and last `fraction` of a curve.
pub fn window_means(curve: &[LossRecord], fraction: f64) -> Option<(f64, f64)> {
    let w = (libm::round(curve.len() as f64 * fraction) as usize).max(1);
    if curve.len() < 2 * w {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}
