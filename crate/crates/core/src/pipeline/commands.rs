use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    cut_patches, enhanced_path, finish_run, homogeneous_patches, image_metrics, read_enhanced, render_profiles,
    unix_now, write_csv, write_enhanced, write_json, CommandOutput, ExperimentConfig, ImageMetrics, InputHasher,
    REPORT_VERSION,
};
use crate::cmf::{train_backbone, BackboneCheckpoint};
use crate::container::{write_atomic, Container};
use crate::controller::{Controller, DecodeMode, LearnedPolicy};
use crate::error::{Error, Result};
use crate::metrics::radiomics::{ccc_report, feature_vector, CccReport};
use crate::metrics::{nps, NpsProfile};
use crate::nn::seeded_rng;
use crate::rl::train_controller;
use crate::rollout::{enhance, enhance_baseline, RolloutResult};
use crate::synth::{build_dataset, mix_seed, ImagePair, Manifest, ManifestEntry, Split};

/// Progress sink for long-running commands.
pub type Reporter<'a> = &'a mut dyn FnMut(&str);

fn read_manifest(path: &Path, hasher: &mut InputHasher) -> Result<(Manifest, PathBuf)> {
    if !path.is_file() {
        return Err(Error::Precondition(format!("manifest {} does not exist", path.display())));
    }
    hasher.add_file(path)?;
    let manifest = Manifest::read(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

fn load_pairs(
    manifest: &Manifest,
    base: &Path,
    split: Split,
    hasher: &mut InputHasher,
) -> Result<Vec<(ManifestEntry, ImagePair)>> {
    manifest
        .entries(split)
        .map(|e| {
            let path = base.join(&e.path);
            let bytes = hasher.add_file(&path)?;
            let pair = crate::synth::read_pair_bytes(&bytes, &path.display().to_string())?;
            Ok((e.clone(), pair))
        })
        .collect()
}

fn read_checkpoint(path: &Path, what: &str, hasher: &mut InputHasher) -> Result<(Container, Vec<u8>)> {
    if !path.is_file() {
        return Err(Error::Precondition(format!("{what} checkpoint {} does not exist", path.display())));
    }
    let bytes = hasher.add_file(path)?;
    let c = Container::from_bytes(&bytes, &path.display().to_string())?;
    Ok((c, bytes))
}

pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<CommandOutput> {
    config.validate()?;
    let started = unix_now();
    let hasher = InputHasher::new(config);
    let dir = super::allocate_run_dir(out)?;
    let d = &config.data;
    let (manifest, path) = build_dataset(
        d.n_pairs,
        &d.phantom,
        &d.degradation,
        &d.split,
        &dir,
        config.data_seed(),
    )?;
    let mut artifacts = vec![path.clone()];
    artifacts.extend(manifest.pairs.iter().map(|e| dir.join(&e.path)));
    let messages = vec![
        format!("manifest: {}", path.display()),
        format!(
            "pairs: train {} val {} test {}",
            manifest.count(Split::Train),
            manifest.count(Split::Val),
            manifest.count(Split::Test)
        ),
    ];
    finish_run(
        "gen-data",
        config,
        hasher,
        started,
        CommandOutput {
            out_dir: dir,
            artifacts,
            messages,
        },
    )
}

pub const BACKBONE_FILE: &str = "backbone.racmf";
pub const LOSS_CSV: &str = "loss.csv";

pub fn cmd_train_backbone(
    config: &ExperimentConfig,
    manifest_path: &Path,
    out: &Path,
    report: Reporter<'_>,
) -> Result<CommandOutput> {
    config.validate()?;
    let started = unix_now();
    let eff = config.resolved();
    let mut hasher = InputHasher::new(config);
    let (manifest, base) = read_manifest(manifest_path, &mut hasher)?;
    let train: Vec<ImagePair> = load_pairs(&manifest, &base, Split::Train, &mut hasher)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let val: Vec<ImagePair> = load_pairs(&manifest, &base, Split::Val, &mut hasher)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let dir = super::allocate_run_dir(out)?;
    let every = eff.backbone.eval_every.max(1);
    let outcome = train_backbone(&train, &val, &eff.backbone, |r| {
        if r.step % every == 0 {
            report(&format!(
                "step {} l_base {:.5} l_mf {:.5} l_img {:.5} val_l_img {}",
                r.step,
                r.l_base,
                r.l_mf,
                r.l_img,
                r.val_l_img.map_or("-".into(), |v| format!("{v:.5}"))
            ));
        }
    })?;
    let ckpt_path = dir.join(BACKBONE_FILE);
    BackboneCheckpoint {
        config: eff.backbone.clone(),
        step: outcome.history.len(),
        net: outcome.net,
    }
    .save(&ckpt_path)?;
    let csv_path = dir.join(LOSS_CSV);
    write_csv(&csv_path, &outcome.history)?;
    let last = outcome.history.last();
    let messages = vec![
        format!("checkpoint: {}", ckpt_path.display()),
        format!(
            "final train L_img {:.6} val L_img {:.6} (initial val {:.6})",
            last.map_or(f64::NAN, |r| r.l_img),
            outcome.final_val_l_img,
            outcome.initial_val_l_img
        ),
    ];
    finish_run(
        "train-backbone",
        config,
        hasher,
        started,
        CommandOutput {
            out_dir: dir,
            artifacts: vec![ckpt_path, csv_path],
            messages,
        },
    )
}

pub const CONTROLLER_FILE: &str = "controller.racmf";
pub const REWARD_CSV: &str = "reward.csv";

pub fn cmd_train_controller(
    config: &ExperimentConfig,
    manifest_path: &Path,
    backbone_path: &Path,
    out: &Path,
    report: Reporter<'_>,
) -> Result<CommandOutput> {
    config.validate()?;
    let started = unix_now();
    let eff = config.resolved();
    let mut hasher = InputHasher::new(config);
    let (manifest, base) = read_manifest(manifest_path, &mut hasher)?;
    let (container, before) = read_checkpoint(backbone_path, "backbone", &mut hasher)?;
    let backbone = BackboneCheckpoint::from_container(&container, &backbone_path.display().to_string())?;
    let train: Vec<ImagePair> = load_pairs(&manifest, &base, Split::Train, &mut hasher)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let dir = super::allocate_run_dir(out)?;
    let outcome = train_controller(
        &backbone.net,
        &train,
        &eff.rollout,
        &eff.controller,
        &eff.ppo,
        &eff.reward,
        |r| {
            report(&format!(
                "episode {} mean_reward {:.5} length {:.2} micro_steps {:.2}",
                r.episode, r.mean_reward, r.mean_episode_length, r.mean_micro_steps
            ))
        },
    )?;
    let after = std::fs::read(backbone_path).map_err(|e| Error::io(backbone_path, e))?;
    if after != before {
        return Err(Error::Contract(format!(
            "backbone file {} changed during controller training",
            backbone_path.display()
        )));
    }
    let ckpt_path = dir.join(CONTROLLER_FILE);
    outcome.controller.save(&ckpt_path)?;
    let csv_path = dir.join(REWARD_CSV);
    write_csv(&csv_path, &outcome.history)?;
    let mut messages = vec![format!("checkpoint: {}", ckpt_path.display())];
    if let Some(r) = outcome.history.last() {
        messages.push(format!(
            "final batch mean reward {:.6} micro-steps {:.2}",
            r.mean_reward, r.mean_micro_steps
        ));
    }
    finish_run(
        "train-controller",
        config,
        hasher,
        started,
        CommandOutput {
            out_dir: dir,
            artifacts: vec![ckpt_path, csv_path],
            messages,
        },
    )
}

pub const TRACES_SUBDIR: &str = "traces";
pub const EVAL_COUNTS_CSV: &str = "eval_counts.csv";

#[derive(Serialize)]
struct EvalCountRow<'a> {
    pair_id: &'a str,
    steps_run: usize,
    micro_steps: usize,
    eval_count: usize,
}

/// Noise seed of the rollout for one pair.
pub fn pair_noise_seed(config: &ExperimentConfig, entry: &ManifestEntry) -> u64 {
    mix_seed(config.resolved().rollout.init_seed, entry.seed)
}

/// Enhances one pair exactly as [`cmd_enhance`] does.
pub fn enhance_pair(
    net: &crate::cmf::FlowNet,
    controller: Option<&Controller>,
    pair: &ImagePair,
    rollout: &crate::rollout::RolloutConfig,
    noise_seed: u64,
) -> Result<RolloutResult> {
    let x_a = pair.source_f64();
    let body = pair.body_mask.mapv(f64::from);
    match controller {
        Some(ctl) => {
            let policy = LearnedPolicy::new(ctl, seeded_rng(0), DecodeMode::Greedy);
            enhance(net, Some(policy), &x_a, &body, rollout, noise_seed)
        }
        None => enhance_baseline(net, &x_a, &body, rollout, noise_seed),
    }
}

pub fn cmd_enhance(
    config: &ExperimentConfig,
    manifest_path: &Path,
    backbone_path: &Path,
    controller_path: Option<&Path>,
    split: Split,
    out: &Path,
) -> Result<CommandOutput> {
    config.validate()?;
    let started = unix_now();
    let eff = config.resolved();
    let mut hasher = InputHasher::new(config);
    let (manifest, base) = read_manifest(manifest_path, &mut hasher)?;
    let (container, _) = read_checkpoint(backbone_path, "backbone", &mut hasher)?;
    let backbone = BackboneCheckpoint::from_container(&container, &backbone_path.display().to_string())?;
    let controller = match controller_path {
        Some(p) => {
            let (c, _) = read_checkpoint(p, "controller", &mut hasher)?;
            let ctl = Controller::from_container(&c, &p.display().to_string())?;
            if ctl.config().m_max != eff.rollout.m_max {
                return Err(Error::spec(
                    "rollout.m_max",
                    format!("controller was trained with m_max {}", ctl.config().m_max),
                ));
            }
            Some(ctl)
        }
        None => None,
    };
    let pairs = load_pairs(&manifest, &base, split, &mut hasher)?;
    if pairs.is_empty() {
        return Err(Error::Precondition(format!("split {} is empty", split.as_str())));
    }
    let dir = super::allocate_run_dir(out)?;
    let mut artifacts = Vec::new();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (entry, pair) in &pairs {
        let res = enhance_pair(&backbone.net, controller.as_ref(), pair, &eff.rollout, pair_noise_seed(config, entry))?;
        let meta = serde_json::json!({
            "kind": "enhanced",
            "version": REPORT_VERSION,
            "pair_id": entry.pair_id,
            "controller": controller.is_some(),
        });
        artifacts.push(write_enhanced(&dir, &entry.pair_id, &res.output, meta)?);
        let trace_path = dir.join(TRACES_SUBDIR).join(format!("{}.json", entry.pair_id));
        write_json(&trace_path, &res.trace)?;
        artifacts.push(trace_path);
        traces.push((entry.pair_id.clone(), res.trace));
    }
    for (id, t) in &traces {
        rows.push(EvalCountRow {
            pair_id: id,
            steps_run: t.steps.len(),
            micro_steps: t.total_micro_steps,
            eval_count: t.total_eval_count,
        });
    }
    let csv_path = dir.join(EVAL_COUNTS_CSV);
    write_csv(&csv_path, &rows)?;
    artifacts.push(csv_path);
    let n = traces.len() as f64;
    let mean_evals = traces.iter().map(|(_, t)| t.total_eval_count as f64).sum::<f64>() / n;
    let messages = vec![
        format!("enhanced {} pairs into {}", traces.len(), dir.display()),
        format!(
            "mode {} mean network evaluations {:.2}",
            if controller.is_some() { "controller" } else { "baseline" },
            mean_evals
        ),
    ];
    finish_run(
        "enhance",
        config,
        hasher,
        started,
        CommandOutput {
            out_dir: dir,
            artifacts,
            messages,
        },
    )
}

/// Enhanced images of `pairs` read from an enhance run directory; a missing
/// file is a user error naming every absent pair.
fn read_enhanced_set(
    dir: &Path,
    pairs: &[(ManifestEntry, ImagePair)],
    hasher: &mut InputHasher,
) -> Result<Vec<ndarray::Array2<f64>>> {
    let missing: Vec<&str> = pairs
        .iter()
        .filter(|(e, _)| !enhanced_path(dir, &e.pair_id).is_file())
        .map(|(e, _)| e.pair_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "missing enhanced outputs under {} for pair_ids: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    pairs
        .iter()
        .map(|(e, p)| {
            let path = enhanced_path(dir, &e.pair_id);
            hasher.add_file(&path)?;
            let x = read_enhanced(&path)?;
            crate::error::ensure_same_shape("enhanced vs pair", x.shape(), &[p.dim().0, p.dim().1])?;
            Ok(x)
        })
        .collect()
}

/// Radial profiles of the input, enhanced and target images over the
/// homogeneous patches of each pair's target.
pub struct NpsComparison {
    pub input: NpsProfile,
    pub enhanced: NpsProfile,
    pub target: NpsProfile,
}

pub fn nps_comparison(
    pairs: &[(ManifestEntry, ImagePair)],
    enhanced: &[ndarray::Array2<f64>],
    side: usize,
    fraction: f64,
) -> Result<NpsComparison> {
    let (mut pi, mut pe, mut pt) = (Vec::new(), Vec::new(), Vec::new());
    for ((_, pair), x) in pairs.iter().zip(enhanced) {
        let corners = homogeneous_patches(pair, side, fraction);
        pi.extend(cut_patches(&pair.source_f64(), &corners, side));
        pe.extend(cut_patches(x, &corners, side));
        pt.extend(cut_patches(&pair.target_f64(), &corners, side));
    }
    if pt.is_empty() {
        return Err(Error::Precondition(format!(
            "no {side}x{side} patch lies wholly inside the body of any pair"
        )));
    }
    Ok(NpsComparison {
        input: nps(&pi)?,
        enhanced: nps(&pe)?,
        target: nps(&pt)?,
    })
}

#[derive(Serialize)]
struct CccSection {
    #[serde(flatten)]
    report: CccReport,
    n_cases: usize,
    /// Pairs without a lesion or with an undefined feature.
    skipped: Vec<String>,
}

#[derive(Serialize)]
struct NpsSection {
    bin_centers: Vec<f64>,
    reference_profile: Vec<f64>,
    test_profile: Vec<f64>,
    input_profile: Vec<f64>,
    n_patches: usize,
}

#[derive(Serialize)]
struct Summary {
    mean_psnr: f64,
    mean_ssim: f64,
    mean_roi_psnr: Option<f64>,
    mean_roi_ssim: Option<f64>,
}

#[derive(Serialize)]
struct MetricsReport {
    version: u32,
    split: Split,
    per_image: Vec<ImageMetrics>,
    summary: Summary,
    ccc: Option<CccSection>,
    nps: Option<NpsSection>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CCC_CSV: &str = "ccc.csv";
pub const NPS_CSV: &str = "nps.csv";
pub const NPS_JSON: &str = "nps.json";
pub const NPS_PNG: &str = "nps.png";

pub fn cmd_eval(
    config: &ExperimentConfig,
    manifest_path: &Path,
    enhanced_dir: &Path,
    split: Split,
    out: &Path,
) -> Result<CommandOutput> {
    config.validate()?;
    let started = unix_now();
    let ev = &config.eval;
    let mut hasher = InputHasher::new(config);
    let (manifest, base) = read_manifest(manifest_path, &mut hasher)?;
    let pairs = load_pairs(&manifest, &base, split, &mut hasher)?;
    if pairs.is_empty() {
        return Err(Error::Precondition(format!("split {} is empty", split.as_str())));
    }
    let enhanced = read_enhanced_set(enhanced_dir, &pairs, &mut hasher)?;
    let per_image = pairs
        .iter()
        .zip(&enhanced)
        .map(|((_, p), x)| image_metrics(p, x))
        .collect::<Result<Vec<_>>>()?;

    let mut reference = Vec::new();
    let mut test = Vec::new();
    let mut skipped = Vec::new();
    for ((e, p), x) in pairs.iter().zip(&enhanced) {
        let roi = p.lesion_mask.mapv(|m| m > 0);
        let features = feature_vector(&p.target_f64(), &roi, ev.n_levels)
            .and_then(|r| Ok((r, feature_vector(x, &roi, ev.n_levels)?)));
        match features {
            Ok((r, t)) => {
                reference.push(r);
                test.push(t);
            }
            Err(Error::Precondition(_) | Error::FeatureUndefined(_) | Error::Numerical(_)) => {
                skipped.push(e.pair_id.clone())
            }
            Err(other) => return Err(other),
        }
    }
    let ccc = if reference.len() >= 2 {
        Some(CccSection {
            report: ccc_report(&reference, &test)?,
            n_cases: reference.len(),
            skipped,
        })
    } else {
        None
    };

    let nps_cmp = match nps_comparison(&pairs, &enhanced, ev.nps_patch, ev.nps_fraction) {
        Ok(c) => Some(c),
        Err(Error::Precondition(_)) => None,
        Err(e) => return Err(e),
    };
    let nps_section = nps_cmp.as_ref().map(|c| NpsSection {
        bin_centers: c.target.bin_centers.clone(),
        reference_profile: c.target.power.clone(),
        test_profile: c.enhanced.power.clone(),
        input_profile: c.input.power.clone(),
        n_patches: c.target.n_patches,
    });

    let summary = Summary {
        mean_psnr: mean_of(per_image.iter().map(|m| m.psnr)).expect("nonempty split"),
        mean_ssim: mean_of(per_image.iter().map(|m| m.ssim)).expect("nonempty split"),
        mean_roi_psnr: mean_of(per_image.iter().filter_map(|m| m.roi_psnr)),
        mean_roi_ssim: mean_of(per_image.iter().filter_map(|m| m.roi_ssim)),
    };
    let mut messages = vec![format!(
        "{} pairs: PSNR {:.3} dB SSIM {:.4}",
        per_image.len(),
        summary.mean_psnr,
        summary.mean_ssim
    )];
    if let (Some(p), Some(s)) = (summary.mean_roi_psnr, summary.mean_roi_ssim) {
        messages.push(format!("lesion ROI: PSNR {p:.3} dB SSIM {s:.4}"));
    }
    match &ccc {
        Some(c) => messages.push(format!("overall CCC {:.4} over {} cases", c.report.overall, c.n_cases)),
        None => messages.push("CCC not computed: fewer than 2 pairs with usable lesion ROIs".into()),
    }

    let dir = super::allocate_run_dir(out)?;
    let mut artifacts = Vec::new();
    let csv_path = dir.join(REPORT_CSV);
    write_csv(&csv_path, &per_image)?;
    artifacts.push(csv_path);
    if let Some(c) = &ccc {
        let path = dir.join(CCC_CSV);
        write_csv(&path, &c.report.per_feature)?;
        artifacts.push(path);
    }
    if let Some(n) = &nps_section {
        let path = dir.join(NPS_CSV);
        write_csv(&path, nps_rows(&n.bin_centers, &n.input_profile, &n.test_profile, &n.reference_profile))?;
        artifacts.push(path);
    }
    let report = MetricsReport {
        version: REPORT_VERSION,
        split,
        per_image,
        summary,
        ccc,
        nps: nps_section,
    };
    let json_path = dir.join(REPORT_JSON);
    write_json(&json_path, &report)?;
    artifacts.insert(0, json_path);
    finish_run(
        "eval",
        config,
        hasher,
        started,
        CommandOutput {
            out_dir: dir,
            artifacts,
            messages,
        },
    )
}

#[derive(Serialize)]
struct NpsRow {
    bin_center: f64,
    input: f64,
    enhanced: f64,
    target: f64,
}

fn nps_rows<'a>(x: &'a [f64], input: &'a [f64], enhanced: &'a [f64], target: &'a [f64]) -> impl Iterator<Item = NpsRow> + 'a {
    (0..x.len()).map(move |i| NpsRow {
        bin_center: x[i],
        input: input[i],
        enhanced: enhanced[i],
        target: target[i],
    })
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

#[derive(Serialize)]
struct NpsDistances {
    enhanced_target: f64,
    input_target: f64,
    input_enhanced: f64,
}

#[derive(Serialize)]
struct NpsReport {
    version: u32,
    split: Split,
    n_patches: usize,
    bin_centers: Vec<f64>,
    input_profile: Vec<f64>,
    enhanced_profile: Vec<f64>,
    target_profile: Vec<f64>,
    /// Euclidean distances between profiles, rounded to 6 decimals.
    distances: NpsDistances,
}

pub fn cmd_nps(
    config: &ExperimentConfig,
    manifest_path: &Path,
    images_dir: &Path,
    split: Split,
    out: &Path,
) -> Result<CommandOutput> {
    config.validate()?;
    let started = unix_now();
    let ev = &config.eval;
    let mut hasher = InputHasher::new(config);
    let (manifest, base) = read_manifest(manifest_path, &mut hasher)?;
    let pairs = load_pairs(&manifest, &base, split, &mut hasher)?;
    if pairs.is_empty() {
        return Err(Error::Precondition(format!("split {} is empty", split.as_str())));
    }
    let enhanced = read_enhanced_set(images_dir, &pairs, &mut hasher)?;
    let c = nps_comparison(&pairs, &enhanced, ev.nps_patch, ev.nps_fraction)?;
    let d = |a: &NpsProfile, b: &NpsProfile| round6(super::profile_distance(&a.power, &b.power));
    let report = NpsReport {
        version: REPORT_VERSION,
        split,
        n_patches: c.target.n_patches,
        bin_centers: c.target.bin_centers.clone(),
        input_profile: c.input.power.clone(),
        enhanced_profile: c.enhanced.power.clone(),
        target_profile: c.target.power.clone(),
        distances: NpsDistances {
            enhanced_target: d(&c.enhanced, &c.target),
            input_target: d(&c.input, &c.target),
            input_enhanced: d(&c.input, &c.enhanced),
        },
    };
    let dir = super::allocate_run_dir(out)?;
    let json_path = dir.join(NPS_JSON);
    write_json(&json_path, &report)?;
    let csv_path = dir.join(NPS_CSV);
    write_csv(
        &csv_path,
        nps_rows(&report.bin_centers, &report.input_profile, &report.enhanced_profile, &report.target_profile),
    )?;
    let png_path = dir.join(NPS_PNG);
    let img = render_profiles(
        &report.bin_centers,
        &[
            ([128, 128, 128], &report.input_profile),
            ([200, 30, 30], &report.enhanced_profile),
            ([20, 140, 40], &report.target_profile),
        ],
    );
    let mut png = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| Error::format(png_path.display().to_string(), e.to_string()))?;
    write_atomic(&png_path, &png)?;
    let messages = vec![
        format!("{} patches", report.n_patches),
        format!(
            "profile distance enhanced-target {:.6} input-target {:.6}",
            report.distances.enhanced_target, report.distances.input_target
        ),
    ];
    finish_run(
        "nps",
        config,
        hasher,
        started,
        CommandOutput {
            out_dir: dir,
            artifacts: vec![json_path, csv_path, png_path],
            messages,
        },
    )
}
