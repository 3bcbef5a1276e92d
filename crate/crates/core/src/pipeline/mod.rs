//! End-to-end commands: data generation, the two training phases,
//! enhancement, evaluation and noise-spectrum comparison.
//!
//! Every command writes into a fresh run directory (an existing non-empty
//! directory gets a `-1`, `-2`, ... suffix) and leaves a `run.json` record
//! next to its artifacts.

mod commands;
pub mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{write_atomic, ArrayData, Container};
use crate::error::{Error, Result};
use crate::metrics::quality::{shift_signed, SIGNED_RANGE};
use crate::metrics::{masked_psnr, masked_ssim, psnr, ssim};
use crate::synth::ImagePair;

pub use commands::{
    cmd_enhance, cmd_eval, cmd_gen_data, cmd_nps, cmd_train_backbone, cmd_train_controller, enhance_pair,
    nps_comparison, pair_noise_seed, NpsComparison, Reporter, BACKBONE_FILE, CCC_CSV, CONTROLLER_FILE,
    EVAL_COUNTS_CSV, LOSS_CSV, NPS_CSV, NPS_JSON, NPS_PNG, REPORT_CSV, REPORT_JSON, REWARD_CSV, TRACES_SUBDIR,
};
pub use config::{load_config, DataConfig, EvalConfig, ExperimentConfig, SEED_ENV};
pub use plot::render_profiles;

pub const RUN_RECORD_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
pub const RUN_RECORD_FILE: &str = "run.json";

/// What a command produced.
#[derive(Clone, Debug, Default)]
pub struct CommandOutput {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable summary lines.
    pub messages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    /// Configuration after combining section seeds with the global seed.
    pub effective_config: ExperimentConfig,
    /// SHA-256 over the configuration and every input file, each framed as
    /// `blob <len>\0<bytes>`.
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Relative to the run directory.
    pub artifacts: Vec<String>,
}

pub(crate) fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Accumulates the input hash of a run.
pub(crate) struct InputHasher {
    sha: Sha256,
    labels: Vec<String>,
}

impl InputHasher {
    pub(crate) fn new(config: &ExperimentConfig) -> Self {
        let mut h = Self {
            sha: Sha256::new(),
            labels: Vec::new(),
        };
        let bytes = serde_json::to_vec(config).expect("config serializes");
        h.add_bytes("config", &bytes);
        h
    }

    pub(crate) fn add_bytes(&mut self, label: &str, bytes: &[u8]) {
        self.sha.update(format!("blob {}\0", bytes.len()).as_bytes());
        self.sha.update(bytes);
        self.labels.push(label.to_string());
    }

    pub(crate) fn add_file(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.add_bytes(&path.display().to_string(), &bytes);
        Ok(bytes)
    }

    fn finish(self) -> (String, Vec<String>) {
        let digest = self.sha.finalize();
        let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
        (hex, self.labels)
    }
}

/// `requested` if it is absent or an empty directory, else the first free
/// `requested-N`. The directory is created.
pub fn allocate_run_dir(requested: &Path) -> Result<PathBuf> {
    let is_free = |p: &Path| match fs::read_dir(p) {
        Ok(mut it) => it.next().is_none(),
        Err(_) => !p.exists(),
    };
    let mut candidate = requested.to_path_buf();
    let mut i = 1;
    while !is_free(&candidate) {
        let name = requested
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        candidate = requested.with_file_name(format!("{name}-{i}"));
        i += 1;
    }
    fs::create_dir_all(&candidate).map_err(|e| Error::io(&candidate, e))?;
    Ok(candidate)
}

pub(crate) fn finish_run(
    command: &str,
    config: &ExperimentConfig,
    hasher: InputHasher,
    started: f64,
    mut out: CommandOutput,
) -> Result<CommandOutput> {
    let (input_hash, inputs) = hasher.finish();
    let artifacts = out
        .artifacts
        .iter()
        .map(|p| {
            p.strip_prefix(&out.out_dir)
                .unwrap_or(p)
                .display()
                .to_string()
        })
        .collect();
    let record = RunRecord {
        version: RUN_RECORD_VERSION,
        command: command.to_string(),
        config: config.clone(),
        effective_config: config.resolved(),
        input_hash,
        inputs,
        started_unix: started,
        finished_unix: unix_now(),
        artifacts,
    };
    let path = out.out_dir.join(RUN_RECORD_FILE);
    write_json(&path, &record)?;
    out.artifacts.push(path);
    Ok(out)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Serializes `rows` as a headed CSV and writes it atomically.
pub(crate) fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Subdirectory of an enhance run holding the enhanced images.
pub const ENHANCED_SUBDIR: &str = "enhanced";

pub fn enhanced_path(dir: &Path, pair_id: &str) -> PathBuf {
    dir.join(ENHANCED_SUBDIR).join(format!("{pair_id}.racmf"))
}

/// Writes one enhanced image as an `x_hat` f64 array.
pub fn write_enhanced(dir: &Path, pair_id: &str, x_hat: &Array2<f64>, meta: serde_json::Value) -> Result<PathBuf> {
    let mut c = Container::with_meta(meta);
    let (h, w) = x_hat.dim();
    c.push("x_hat", &[h, w], ArrayData::F64(x_hat.iter().copied().collect()));
    let path = enhanced_path(dir, pair_id);
    c.write(&path)?;
    Ok(path)
}

pub fn read_enhanced(path: &Path) -> Result<Array2<f64>> {
    let origin = path.display().to_string();
    let c = Container::read(path)?;
    let a = c
        .get("x_hat")
        .ok_or_else(|| Error::format(origin.as_str(), "missing array `x_hat`"))?;
    match (&a.data, a.shape.as_slice()) {
        (ArrayData::F64(v), &[h, w]) => {
            Ok(Array2::from_shape_vec((h, w), v.clone()).expect("container checked the shape"))
        }
        _ => Err(Error::format(origin, "`x_hat` must be a 2-D f64 array")),
    }
}

/// Full-image and lesion-ROI quality of one enhanced image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub pair_id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when the pair has no lesion pixels.
    pub roi_psnr: Option<f64>,
    pub roi_ssim: Option<f64>,
}

pub fn image_metrics(pair: &ImagePair, x_hat: &Array2<f64>) -> Result<ImageMetrics> {
    let target = pair.target_f64();
    crate::error::ensure_same_shape("enhanced vs target", x_hat.shape(), target.shape())?;
    let (xs, ts) = (shift_signed(x_hat), shift_signed(&target));
    let roi = pair.lesion_mask.mapv(f64::from);
    let has_roi = roi.iter().any(|&m| m > 0.0);
    Ok(ImageMetrics {
        pair_id: pair.pair_id.clone(),
        psnr: psnr(x_hat, &target, SIGNED_RANGE)?.db,
        ssim: ssim(&xs, &ts, SIGNED_RANGE)?,
        roi_psnr: if has_roi {
            Some(masked_psnr(x_hat, &target, &roi, SIGNED_RANGE)?.db)
        } else {
            None
        },
        roi_ssim: if has_roi {
            Some(masked_ssim(&xs, &ts, &roi, SIGNED_RANGE)?)
        } else {
            None
        },
    })
}

/// Top-left corners of the `side`-pixel tiles of the non-overlapping grid that
/// lie wholly inside the body and whose target variance is in the lowest
/// `fraction` (at least one tile when any qualifies). Ties keep raster order.
pub fn homogeneous_patches(pair: &ImagePair, side: usize, fraction: f64) -> Vec<(usize, usize)> {
    let target = pair.target_f64();
    let (h, w) = target.dim();
    let mut cands = Vec::new();
    for y in (0..h.saturating_sub(side - 1)).step_by(side) {
        for x in (0..w.saturating_sub(side - 1)).step_by(side) {
            let inside = pair
                .body_mask
                .slice(ndarray::s![y..y + side, x..x + side])
                .iter()
                .all(|&m| m > 0);
            if !inside {
                continue;
            }
            let t = target.slice(ndarray::s![y..y + side, x..x + side]);
            let mean = t.mean().expect("nonempty");
            let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
            cands.push((var, (y, x)));
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = ((cands.len() as f64 * fraction).ceil() as usize).clamp(cands.len().min(1), cands.len());
    cands.into_iter().take(keep).map(|(_, p)| p).collect()
}

pub(crate) fn cut_patches(img: &Array2<f64>, corners: &[(usize, usize)], side: usize) -> Vec<Array2<f64>> {
    corners
        .iter()
        .map(|&(y, x)| img.slice(ndarray::s![y..y + side, x..x + side]).to_owned())
        .collect()
}

/// Euclidean distance between two profiles of equal length.
pub fn profile_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
