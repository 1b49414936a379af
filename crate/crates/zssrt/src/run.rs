//! Run directories: resolved configuration, stage artifacts, loss log, manifest
//! and the single-writer lock.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use zssrt_core::train::{DatasetKind, LossRecord};
use zssrt_core::TrainConfig;

use crate::error::{read, write_atomic, AppError, Result};

pub const RUN_DIR_ENV: &str = "ZSSRT_RUN_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Scaled-down CPU defaults.
    Desk,
    /// Published full-scale hyperparameters.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SupervisorKind {
    /// Learned degradation network.
    Sdm,
    /// Plain box averaging.
    Box,
}

/// Everything a run needs, persisted as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Factor applied to stored images before training (1 = already low resolution).
    pub downsample: usize,
    pub profile: Profile,
    pub kind: DatasetKind,
    pub supervisor: SupervisorKind,
    pub train: TrainConfig,
}

/// Flag-level overrides, highest precedence.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scale: Option<usize>,
    pub profile: Option<Profile>,
    pub supervisor: Option<SupervisorKind>,
    pub downsample: Option<usize>,
}

impl RunConfig {
    pub fn defaults(profile: Profile, scale: usize, kind: DatasetKind) -> Self {
        let train = match profile {
            Profile::Desk => TrainConfig::desk_at(scale),
            Profile::Full => TrainConfig::full(scale, kind),
        };
        RunConfig { dataset: PathBuf::new(), downsample: 1, profile, kind, supervisor: SupervisorKind::Sdm, train }
    }

    /// Defaults < config file < flags. `base` replaces the defaults layer when
    /// continuing an existing run.
    pub fn resolve(base: Option<RunConfig>, file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let file_value = match file {
            Some(p) => Some(serde_json::from_slice::<Value>(&read(p)?).map_err(|e| AppError::format(p, e))?),
            None => None,
        };
        let pick = |key: &str| file_value.as_ref().and_then(|v| v.pointer(key)).cloned();
        let base = match base {
            Some(b) => b,
            None => {
                let profile = flags
                    .profile
                    .or_else(|| pick("/profile").and_then(|v| serde_json::from_value(v).ok()))
                    .unwrap_or(Profile::Desk);
                let kind = pick("/kind").and_then(|v| serde_json::from_value(v).ok()).unwrap_or(DatasetKind::Synthetic);
                let scale = flags
                    .scale
                    .or_else(|| pick("/train/scale").and_then(|v| v.as_u64()).map(|v| v as usize))
                    .unwrap_or(2);
                if ![2, 4].contains(&scale) {
                    return Err(AppError::Usage(format!("--scale must be 2 or 4, got {scale}")));
                }
                RunConfig::defaults(profile, scale, kind)
            }
        };
        let mut value = serde_json::to_value(&base).expect("config serializes");
        if let Some(f) = file_value {
            merge(&mut value, f);
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| AppError::format(file.unwrap_or(Path::new("config")), e))?;
        if let Some(d) = &flags.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(s) = flags.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = flags.scale {
            if ![2, 4].contains(&s) {
                return Err(AppError::Usage(format!("--scale must be 2 or 4, got {s}")));
            }
            cfg.train.scale = s;
            cfg.train.sdm.scale = s;
        }
        if let Some(s) = flags.supervisor {
            cfg.supervisor = s;
        }
        if let Some(d) = flags.downsample {
            cfg.downsample = d;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Short hex digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Recursive object merge; non-object values replace.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

pub const STAGES: [&str; 5] = ["scene", "coarse", "sdm", "fine", "eval"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub complete: bool,
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: Value,
    pub stages: BTreeMap<String, StageEntry>,
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

/// Holds the run lock; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

impl RunDir {
    /// `ZSSRT_RUN_DIR` takes precedence over the `--out` value.
    pub fn from_flag(out: &Path) -> Self {
        let root = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| out.to_path_buf());
        RunDir { root }
    }

    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn coarse(&self) -> PathBuf {
        self.root.join("coarse.ckpt")
    }
    pub fn sdm(&self) -> PathBuf {
        self.root.join("sdm.ckpt")
    }
    pub fn fine(&self) -> PathBuf {
        self.root.join("fine.ckpt")
    }
    pub fn ensemble_dir(&self) -> PathBuf {
        self.root.join("ensemble")
    }
    pub fn snapshot(&self, k: usize) -> PathBuf {
        self.ensemble_dir().join(format!("snap_{k}.ckpt"))
    }
    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn renders(&self) -> PathBuf {
        self.root.join("renders")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn plot(&self) -> PathBuf {
        self.root.join("report.png")
    }

    /// Take the single-writer lock.
    pub fn lock(&self) -> Result<RunLock> {
        std::fs::create_dir_all(&self.root).map_err(|e| AppError::io(&self.root, e))?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AppError::Locked(self.root.clone())),
            Err(e) => Err(AppError::io(&path, e)),
        }
    }

    pub fn require(&self, path: PathBuf) -> Result<PathBuf> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(AppError::Missing(path))
        }
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        let p = self.require(self.config())?;
        serde_json::from_slice(&read(&p)?).map_err(|e| AppError::format(&p, e))
    }

    pub fn save_config(&self, cfg: &RunConfig) -> Result<()> {
        write_atomic(&self.config(), &serde_json::to_vec_pretty(cfg).expect("config serializes"))
    }

    pub fn load_manifest(&self) -> Result<RunManifest> {
        let p = self.manifest();
        if !p.is_file() {
            return Ok(RunManifest::default());
        }
        serde_json::from_slice(&read(&p)?).map_err(|e| AppError::format(&p, e))
    }

    /// Mark `stage` complete. Later stages are invalidated since they depend on it.
    pub fn complete_stage(&self, cfg: &RunConfig, stage: &str, artifacts: &[PathBuf], seconds: f64) -> Result<()> {
        let mut m = self.load_manifest()?;
        m.run_id = format!("{}-s{}", cfg.digest(), cfg.train.seed);
        m.config = serde_json::to_value(cfg).expect("config serializes");
        let idx = STAGES.iter().position(|s| *s == stage).expect("known stage");
        for later in &STAGES[idx + 1..] {
            m.stages.remove(*later);
        }
        let artifacts = artifacts
            .iter()
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        m.stages.insert(stage.to_string(), StageEntry { complete: true, artifacts, seconds });
        write_atomic(&self.manifest(), &serde_json::to_vec_pretty(&m).expect("manifest serializes"))
    }

    /// Replace the rows of `stage` in `losses.csv` with `records`.
    pub fn record_losses(&self, stage: &str, records: &[LossRecord]) -> Result<()> {
        let path = self.losses();
        let mut lines: Vec<String> = if path.is_file() {
            String::from_utf8_lossy(&read(&path)?)
                .lines()
                .skip(1)
                .filter(|l| !l.starts_with(&format!("{stage},")))
                .map(str::to_owned)
                .collect()
        } else {
            Vec::new()
        };
        for r in records {
            lines.push(format!("{},{},{:e},{:e},{:e}", r.stage.name(), r.step, r.total, r.mse, r.perc));
        }
        let order = |l: &String| STAGES.iter().position(|s| l.starts_with(&format!("{s},"))).unwrap_or(usize::MAX);
        lines.sort_by_key(order);
        let mut out = String::from("stage,step,total,mse,perc\n");
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        write_atomic(&path, out.as_bytes())
    }

    /// Loss rows as `(stage, step, total)`.
    pub fn read_losses(&self) -> Result<Vec<(String, usize, f64)>> {
        let path = self.losses();
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let text = String::from_utf8_lossy(&read(&path)?).into_owned();
        let mut out = Vec::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(AppError::format(&path, format!("bad row: {line}")));
            }
            let step = cols[1].parse().map_err(|e| AppError::format(&path, e))?;
            let total = cols[2].parse().map_err(|e| AppError::format(&path, e))?;
            out.push((cols[0].to_string(), step, total));
        }
        Ok(out)
    }
}
