//! Stage commands operating on a run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use zssrt_core::features::default_extractor;
use zssrt_core::metrics::{psnr, ssim, MetricReport};
use zssrt_core::render::render_image;
use zssrt_core::train::{train_coarse, train_fine, train_sdm, LossRecord};
use zssrt_core::{EnsembleField, FieldSnapshot, Image, RadianceField, Supervisor, TensorialField};

use crate::checkpoint::{load_field, load_sdm, save_field, save_sdm};
use crate::dataset::{generate_synthetic_scene, Dataset, Split, SyntheticSpec};
use crate::error::{AppError, Result};
use crate::imageio::{save_float_map, save_png};
use crate::report::emit_report;
use crate::run::{Overrides, RunConfig, RunDir, RunLock, SupervisorKind};

/// Options shared by the stage commands.
#[derive(Clone, Debug, Default)]
pub struct StageArgs {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelChoice {
    Coarse,
    Fine,
}

/// What to render and evaluate.
#[derive(Clone, Copy, Debug)]
pub struct RenderSpec {
    pub model: ModelChoice,
    pub ensemble: bool,
    pub split: Split,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec { model: ModelChoice::Fine, ensemble: true, split: Split::Test }
    }
}

const RENDER_CHUNK: usize = 4096;

struct Session {
    run: RunDir,
    _lock: RunLock,
    cfg: RunConfig,
}

fn open(args: &StageArgs, fresh: bool) -> Result<Session> {
    let run = RunDir::from_flag(&args.out);
    let lock = run.lock()?;
    let base = if run.config().is_file() && !(fresh && args.force) { Some(run.load_config()?) } else { None };
    if base.is_none() && !fresh {
        return Err(AppError::Missing(run.coarse()));
    }
    let cfg = RunConfig::resolve(base, args.config.as_deref(), &args.overrides)?;
    Ok(Session { run, _lock: lock, cfg })
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(AppError::Usage(format!("{} already exists; pass --force to recompute it", path.display())));
    }
    Ok(())
}

fn load_train(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.dataset.as_os_str().is_empty() {
        return Err(AppError::Usage("no dataset given; pass --dataset".into()));
    }
    Dataset::load(&cfg.dataset, Split::Train, cfg.train.background, cfg.downsample)
}

fn progress(stage: &'static str, total: usize) -> impl FnMut(&LossRecord) {
    let every = (total / 10).max(1);
    move |r: &LossRecord| {
        if r.step % every == 0 || r.step == total {
            info!("{stage} step {}/{total}: loss {:.6} (mse {:.6}, perc {:.6})", r.step, r.total, r.mse, r.perc);
        }
    }
}

pub fn cmd_generate(out: &Path, seed: u64, n_views: usize, res: usize) -> Result<()> {
    generate_synthetic_scene(out, SyntheticSpec { seed, n_views, res })?;
    info!("wrote synthetic dataset to {}", out.display());
    Ok(())
}

pub fn cmd_train_coarse(args: &StageArgs) -> Result<()> {
    let Session { run, _lock, mut cfg } = open(args, true)?;
    refuse_overwrite(&run.coarse(), args.force)?;
    let ds = load_train(&cfg)?;
    ds.fit_field(&mut cfg.train.field);
    cfg.train.validate()?;
    run.save_config(&cfg)?;
    run.complete_stage(&cfg, "scene", &[cfg.dataset.clone()], 0.0)?;
    let t = Instant::now();
    let mut field = TensorialField::init(cfg.train.field.clone(), cfg.train.seed)?;
    let curve = train_coarse(&mut field, &ds.images, &cfg.train, &mut progress("coarse", cfg.train.coarse_steps))?;
    save_field(&run.coarse(), &field, cfg.train.coarse_steps)?;
    run.record_losses("coarse", &curve)?;
    run.complete_stage(&cfg, "coarse", &[run.coarse(), run.losses()], t.elapsed().as_secs_f64())
}

pub fn cmd_train_sdm(args: &StageArgs) -> Result<()> {
    let Session { run, _lock, cfg } = open(args, false)?;
    let (coarse, _) = load_field(&run.require(run.coarse())?)?;
    refuse_overwrite(&run.sdm(), args.force)?;
    run.save_config(&cfg)?;
    let ds = load_train(&cfg)?;
    let t = Instant::now();
    let (net, curve) = train_sdm(&coarse, &ds.images, &cfg.train, &mut progress("sdm", cfg.train.sdm_steps))?;
    save_sdm(&run.sdm(), &net)?;
    run.record_losses("sdm", &curve)?;
    run.complete_stage(&cfg, "sdm", &[run.sdm(), run.losses()], t.elapsed().as_secs_f64())
}

pub fn cmd_train_fine(args: &StageArgs) -> Result<()> {
    let Session { run, _lock, cfg } = open(args, false)?;
    let (coarse, _) = load_field(&run.require(run.coarse())?)?;
    let net = match cfg.supervisor {
        SupervisorKind::Sdm => Some(load_sdm(&run.require(run.sdm())?)?),
        SupervisorKind::Box => None,
    };
    refuse_overwrite(&run.fine(), args.force)?;
    run.save_config(&cfg)?;
    let ds = load_train(&cfg)?;
    let supervisor = match &net {
        Some(n) => Supervisor::Sdm(n),
        None => Supervisor::Box(cfg.train.scale),
    };
    let t = Instant::now();
    let extractor = default_extractor(cfg.train.extractor_seed);
    let out = train_fine(&coarse, supervisor, &extractor, &ds.images, &cfg.train, &mut progress("fine", cfg.train.fine_steps))?;
    save_field(&run.fine(), &out.field, cfg.train.fine_steps)?;
    let ens = run.ensemble_dir();
    if ens.exists() {
        std::fs::remove_dir_all(&ens).map_err(|e| AppError::io(&ens, e))?;
    }
    let mut artifacts = vec![run.fine(), run.losses()];
    for (k, snap) in out.ensemble.snapshots().iter().enumerate() {
        save_field(&run.snapshot(k), snap.field(), snap.step())?;
        artifacts.push(run.snapshot(k));
    }
    run.record_losses("fine", &out.curve)?;
    run.complete_stage(&cfg, "fine", &artifacts, t.elapsed().as_secs_f64())
}

/// The field selected by `spec`, boxed behind the query interface.
pub fn load_model(run: &RunDir, cfg: &RunConfig, spec: &RenderSpec) -> Result<Box<dyn RadianceField>> {
    match spec.model {
        ModelChoice::Coarse => Ok(Box::new(load_field(&run.require(run.coarse())?)?.0)),
        ModelChoice::Fine if !spec.ensemble => Ok(Box::new(load_field(&run.require(run.fine())?)?.0)),
        ModelChoice::Fine => {
            run.require(run.fine())?;
            let mut snaps = Vec::with_capacity(cfg.train.snapshot_count);
            for k in 0..cfg.train.snapshot_count {
                let (f, step) = load_field(&run.require(run.snapshot(k))?)?;
                snaps.push(FieldSnapshot::new(step, f));
            }
            Ok(Box::new(EnsembleField::new(snaps)?))
        }
    }
}

/// Render every view of a split at `s×` the training resolution.
pub fn render_split(field: &dyn RadianceField, ds: &Dataset, cfg: &RunConfig) -> Result<Vec<(Image, Image)>> {
    let opts = cfg.train.eval_options();
    ds.images.iter().map(|img| Ok(render_image(field, &img.pose, cfg.train.scale, &opts, RENDER_CHUNK)?)).collect()
}

fn render_tag(spec: &RenderSpec) -> &'static str {
    match (spec.model, spec.ensemble) {
        (ModelChoice::Coarse, _) => "coarse",
        (ModelChoice::Fine, true) => "fine_ensemble",
        (ModelChoice::Fine, false) => "fine",
    }
}

fn split_dataset(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    match split {
        Split::Train => load_train(cfg),
        Split::Test => Dataset::load(&cfg.dataset, Split::Test, cfg.train.background, cfg.downsample),
    }
}

pub fn cmd_render(args: &StageArgs, spec: RenderSpec) -> Result<PathBuf> {
    let Session { run, _lock, cfg } = open(args, false)?;
    let field = load_model(&run, &cfg, &spec)?;
    let ds = split_dataset(&cfg, spec.split)?;
    let dir = run.renders().join(render_tag(&spec));
    for ((rgb, depth), name) in render_split(field.as_ref(), &ds, &cfg)?.iter().zip(&ds.names) {
        save_png(&dir.join(format!("{name}.png")), rgb)?;
        save_float_map(&dir.join(format!("{name}.depth")), depth)?;
    }
    info!("rendered {} views to {}", ds.names.len(), dir.display());
    Ok(dir)
}

/// Render, score against the references and write the report files.
pub fn cmd_evaluate(args: &StageArgs, spec: RenderSpec) -> Result<MetricReport> {
    let Session { run, _lock, cfg } = open(args, false)?;
    let t = Instant::now();
    let field = load_model(&run, &cfg, &spec)?;
    let ds = split_dataset(&cfg, spec.split)?;
    let report = evaluate_field(field.as_ref(), &ds, &cfg, t)?;
    emit_report(&report, &run.read_losses()?, render_tag(&spec), &run.metrics(), &run.summary(), &run.plot())?;
    run.complete_stage(&cfg, "eval", &[run.metrics(), run.summary(), run.plot()], t.elapsed().as_secs_f64())?;
    info!("{}: mean PSNR {:.3} dB, mean SSIM {:.4}", render_tag(&spec), report.mean_psnr, report.mean_ssim);
    Ok(report)
}

pub fn evaluate_field(field: &dyn RadianceField, ds: &Dataset, cfg: &RunConfig, started: Instant) -> Result<MetricReport> {
    let renders = render_split(field, ds, cfg)?;
    let (mut p, mut s) = (Vec::new(), Vec::new());
    for (i, (rgb, _)) in renders.iter().enumerate() {
        let reference = ds.reference(i, cfg.train.scale)?;
        let rgb = rgb.clamped01();
        p.push(psnr(&rgb, &reference)?);
        s.push(ssim(&rgb, &reference)?);
    }
    Ok(MetricReport::new(ds.names.clone(), p, s, started.elapsed().as_secs_f64(), cfg.digest())?)
}

/// All stages in order: coarse, degradation network, fine, render, evaluate.
pub fn cmd_pipeline(args: &StageArgs, spec: RenderSpec) -> Result<MetricReport> {
    cmd_train_coarse(args)?;
    let later = StageArgs { config: None, overrides: Overrides::default(), ..args.clone() };
    let sup = RunDir::from_flag(&args.out).load_config()?.supervisor;
    if sup == SupervisorKind::Sdm {
        cmd_train_sdm(&later)?;
    }
    cmd_train_fine(&later)?;
    cmd_render(&later, spec)?;
    cmd_evaluate(&later, spec)
}
