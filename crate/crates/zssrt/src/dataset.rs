//! Blender-style posed-image datasets and the procedural scene writer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zssrt_core::camera::CameraPose;
use zssrt_core::math::Vec3;
use zssrt_core::scene::{hemisphere_poses, SyntheticScene, RIG_FOV, RIG_RADIUS};
use zssrt_core::{FieldConfig, Image, LevelTag, PosedImage};

use crate::error::{read, write_atomic, AppError, Result};
use crate::imageio::{load_png, save_png};

pub const TRAIN_FILE: &str = "transforms.json";
pub const TRAIN_FILE_ALT: &str = "transforms_train.json";
pub const TEST_FILE: &str = "transforms_test.json";
pub const DEFAULT_BOUND: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    /// Row-major camera-to-world matrix.
    pub transform_matrix: [[f64; 4]; 4],
    /// Higher-resolution renders of the same view keyed by scale factor.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub references: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformsFile {
    pub camera_angle_x: f64,
    pub frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    /// Low-resolution posed views.
    pub images: Vec<PosedImage>,
    /// Frame names (file stems) in load order.
    pub names: Vec<String>,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub near: f64,
    pub far: f64,
    frames: Vec<Frame>,
    originals: Option<Vec<Image>>,
    downsample: usize,
    background: [f64; 3],
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    let p = root.join(rel.trim_start_matches("./"));
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

fn transforms_path(root: &Path, split: Split) -> Result<PathBuf> {
    let candidates: &[&str] = match split {
        Split::Train => &[TRAIN_FILE, TRAIN_FILE_ALT],
        Split::Test => &[TEST_FILE],
    };
    for c in candidates {
        let p = root.join(c);
        if p.is_file() {
            return Ok(p);
        }
    }
    let p = root.join(candidates[0]);
    Err(AppError::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "transforms file not found")))
}

/// Near and far distances that cover the bounding box from every camera.
fn ray_limits(poses: &[CameraPose], min: Vec3, max: Vec3) -> (f64, f64) {
    let center = (min + max) * 0.5;
    let half = (max - min).norm() * 0.5;
    let dists: Vec<f64> = poses.iter().map(|p| (p.origin() - center).norm()).collect();
    let lo = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = dists.iter().cloned().fold(0.0, f64::max);
    ((lo - half).max(0.05), hi + half)
}

impl Dataset {
    /// Load one split. With `downsample > 1` the stored images are treated as
    /// high-resolution originals and box-averaged to form the training views.
    pub fn load(root: &Path, split: Split, background: [f64; 3], downsample: usize) -> Result<Self> {
        if downsample == 0 {
            return Err(AppError::Usage("downsample factor must be at least 1".into()));
        }
        let tpath = transforms_path(root, split)?;
        let tf: TransformsFile = serde_json::from_slice(&read(&tpath)?).map_err(|e| AppError::format(&tpath, e))?;
        if tf.frames.is_empty() {
            return Err(AppError::format(&tpath, "no frames"));
        }
        let (bmin, bmax) = match &tf.bounds {
            Some(b) => (Vec3(b.min), Vec3(b.max)),
            None => (Vec3::splat(-DEFAULT_BOUND), Vec3::splat(DEFAULT_BOUND)),
        };
        if (0..3).any(|a| !(bmin[a] < bmax[a])) {
            return Err(AppError::format(&tpath, "bounds min must be below max on every axis"));
        }
        let mut images = Vec::with_capacity(tf.frames.len());
        let mut names = Vec::with_capacity(tf.frames.len());
        let mut originals = Vec::new();
        for frame in &tf.frames {
            let path = resolve(root, &frame.file_path);
            let full = load_png(&path, background)?;
            let pixels = if downsample > 1 {
                full.box_downsample(downsample).map_err(|e| AppError::format(&path, e))?
            } else {
                full.clone()
            };
            let pose = CameraPose::new(frame.transform_matrix, tf.camera_angle_x, pixels.width, pixels.height)
                .map_err(|e| AppError::format(&path, e))?;
            images.push(PosedImage::new(pixels, pose, LevelTag::Lr).map_err(|e| AppError::format(&path, e))?);
            names.push(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            if downsample > 1 {
                originals.push(full);
            }
        }
        let poses: Vec<CameraPose> = images.iter().map(|i| i.pose.clone()).collect();
        let (near0, far0) = ray_limits(&poses, bmin, bmax);
        Ok(Dataset {
            root: root.to_path_buf(),
            images,
            names,
            bounds_min: bmin,
            bounds_max: bmax,
            near: tf.near.unwrap_or(near0),
            far: tf.far.unwrap_or(far0),
            frames: tf.frames,
            originals: (downsample > 1).then_some(originals),
            downsample,
            background,
        })
    }

    /// Copy the scene bounds and ray limits into a field configuration.
    pub fn fit_field(&self, cfg: &mut FieldConfig) {
        cfg.bounds_min = self.bounds_min;
        cfg.bounds_max = self.bounds_max;
        cfg.near = self.near;
        cfg.far = self.far;
    }

    /// Ground truth for view `i` at `s×` the training resolution: a stored
    /// reference render, or the box-averaged original when loading downsampled.
    pub fn reference(&self, i: usize, s: usize) -> Result<Image> {
        if let Some(rel) = self.frames[i].references.get(&s.to_string()) {
            return load_png(&resolve(&self.root, rel), self.background);
        }
        if let Some(orig) = &self.originals {
            if self.downsample % s == 0 {
                return Ok(orig[i].box_downsample(self.downsample / s)?);
            }
        }
        Err(AppError::Missing(resolve(&self.root, &format!("{}_x{s}", self.frames[i].file_path))))
    }
}

/// Options for the procedural dataset writer.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_views: usize,
    pub res: usize,
}

const SUPERSAMPLE: usize = 2;
const REFERENCE_SCALES: [usize; 2] = [2, 4];

fn write_split(root: &Path, scene: &SyntheticScene, poses: &[CameraPose], dir: &str, file: &str, bound: f64) -> Result<()> {
    let mut frames = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        // Everything derives from one render at the largest reference scale.
        let base = scene.render(pose, SUPERSAMPLE);
        let lr = base.box_downsample(4)?;
        let name = format!("{dir}/r_{k}");
        save_png(&root.join(format!("{name}.png")), &lr)?;
        let mut references = BTreeMap::new();
        for s in REFERENCE_SCALES {
            let img = if s == 4 { base.clone() } else { base.box_downsample(4 / s)? };
            let rel = format!("./{name}_x{s}.png");
            save_png(&root.join(rel.trim_start_matches("./")), &img)?;
            references.insert(s.to_string(), rel);
        }
        frames.push(Frame { file_path: format!("./{name}"), transform_matrix: pose.cam_to_world, references });
    }
    let tf = TransformsFile {
        camera_angle_x: RIG_FOV,
        frames,
        bounds: Some(Bounds { min: [-bound; 3], max: [bound; 3] }),
        near: Some(RIG_RADIUS - bound * 3f64.sqrt() - 0.1),
        far: Some(RIG_RADIUS + bound * 3f64.sqrt() + 0.1),
    };
    let json = serde_json::to_vec_pretty(&tf).expect("transforms serialize");
    write_atomic(&root.join(file), &json)
}

/// Bounds written for procedural scenes.
pub const SYNTHETIC_BOUND: f64 = 1.2;

/// Write a procedural dataset: `n_views` training views at `res×res`, half as
/// many test views, and exact 2×/4× references for every view.
pub fn generate_synthetic_scene(root: &Path, spec: SyntheticSpec) -> Result<()> {
    if spec.n_views < 2 {
        return Err(zssrt_core::Error::Config(format!("need at least 2 views, got {}", spec.n_views)).into());
    }
    if spec.res < 32 {
        return Err(zssrt_core::Error::Config(format!("resolution must be at least 32, got {}", spec.res)).into());
    }
    std::fs::create_dir_all(root).map_err(|e| AppError::io(root, e))?;
    let scene = SyntheticScene::procedural(spec.seed);
    let hr = 4 * spec.res;
    let train = hemisphere_poses(spec.seed, spec.n_views, hr, false)?;
    let test = hemisphere_poses(spec.seed, (spec.n_views / 2).max(2), hr, true)?;
    write_split(root, &scene, &train, "train", TRAIN_FILE, SYNTHETIC_BOUND)?;
    write_split(root, &scene, &test, "test", TEST_FILE, SYNTHETIC_BOUND)?;
    let desc = serde_json::to_vec_pretty(&scene).expect("scene serializes");
    write_atomic(&root.join("scene.json"), &desc)
}
