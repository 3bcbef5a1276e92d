//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! The test itself fails if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use racmf::cmf::train_backbone;
use racmf::controller::{DecodeMode, LearnedPolicy, RandomPolicy, UniformPolicy};
use racmf::nn::seeded_rng;
use racmf::pipeline::{
    cmd_enhance, cmd_gen_data, cmd_train_backbone, cmd_train_controller, enhance_pair, image_metrics, load_config,
    nps_comparison, pair_noise_seed, profile_distance, ExperimentConfig,
};
use racmf::rl::{evaluate_policy, train_controller};
use racmf::synth::{Manifest, ManifestEntry, Split};

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: String) -> Line {
    println!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    Line { id, pass, detail }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn criterion_1() -> Line {
    let t0 = Instant::now();
    let worst = (0..20u64).map(|i| common::jvp_case(1000 + i, 1e-3).rel_err).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    line("1", worst <= 1e-3 && secs < 60.0, format!("max rel err {worst:.2e} over 20 nets, {secs:.1}s"))
}

fn criterion_2() -> Line {
    let e = common::meanflow_identity_errors(20, 7);
    let pass = e.iter().all(|&x| x <= 1e-6);
    line("2", pass, format!("r=t {:.1e}, constant {:.1e}, identity {:.1e}", e[0], e[1], e[2]))
}

fn criterion_3() -> Line {
    let t0 = Instant::now();
    let (gap, feature, cases) = common::radiomics_oracle_gap(25, 8, 11);
    let hand = common::metric_hand_cases();
    let failed: Vec<&str> = hand.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let secs = t0.elapsed().as_secs_f64();
    line(
        "3",
        gap <= 1e-9 && failed.is_empty() && secs < 120.0,
        format!(
            "max feature gap {gap:.1e} ({feature}) over {cases} ROIs, {} hand cases, failed {failed:?}, {secs:.1}s",
            hand.len()
        ),
    )
}

fn criterion_4() -> Line {
    let laws = common::check_rollout_laws(100, 3);
    let zero = common::zero_budget_matches_baseline(10, 5);
    let detail = match (&laws, &zero) {
        (Ok(n), Ok(())) => format!("100 actions, {n} decisions checked, zero-budget rollout identical"),
        (Err(e), _) | (_, Err(e)) => format!("law broken: {e}"),
    };
    line("4", laws.is_ok() && zero.is_ok(), detail)
}

fn acceptance_config() -> ExperimentConfig {
    let sets: Vec<String> = [
        "data.n_pairs=64",
        "backbone.base_width=8",
        "backbone.depth=2",
        "backbone.embed_dim=32",
        "backbone.steps=4000",
        "backbone.learning_rate=0.002",
        "backbone.batch_size=4",
        "backbone.eval_every=500",
        "controller.feature_width=16",
        "ppo.n_episodes=300",
        "ppo.learning_rate=0.001",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    load_config(None, &sets, None).unwrap()
}

struct Toy {
    cfg: ExperimentConfig,
    test: Vec<(ManifestEntry, racmf::synth::ImagePair)>,
    lines: Vec<Line>,
}

fn load_split(manifest: &Path, split: Split) -> Vec<(ManifestEntry, racmf::synth::ImagePair)> {
    let m = Manifest::read(manifest).unwrap();
    let base = manifest.parent().unwrap();
    m.entries(split)
        .map(|e| (e.clone(), racmf::synth::read_pair(&base.join(&e.path)).unwrap()))
        .collect()
}

/// Criteria 5 to 8 share one dataset, backbone and controller.
fn toy_scale(tmp: &Path) -> Toy {
    let cfg = acceptance_config();
    let eff = cfg.resolved();
    let data = cmd_gen_data(&cfg, &tmp.join("data")).unwrap();
    let manifest = data.out_dir.join("manifest.json");
    let pairs = |s| load_split(&manifest, s).into_iter().map(|(_, p)| p).collect::<Vec<_>>();
    let (train, val) = (pairs(Split::Train), pairs(Split::Val));
    let test = load_split(&manifest, Split::Test);
    let test_pairs: Vec<_> = test.iter().map(|(_, p)| p.clone()).collect();
    let mut lines = Vec::new();

    let t0 = Instant::now();
    let outcome = train_backbone(&train, &val, &eff.backbone, |_| {}).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let net = outcome.net;
    let baseline: Vec<_> = test
        .iter()
        .map(|(e, p)| enhance_pair(&net, None, p, &eff.rollout, pair_noise_seed(&cfg, e)).unwrap().output)
        .collect();
    let psnr_in = mean(test.iter().map(|(_, p)| image_metrics(p, &p.source_f64()).unwrap().psnr));
    let psnr_out = mean(test.iter().zip(&baseline).map(|((_, p), x)| image_metrics(p, x).unwrap().psnr));
    let drop = 1.0 - outcome.final_val_l_img / outcome.initial_val_l_img;
    lines.push(line(
        "5",
        psnr_out - psnr_in >= 3.0 && drop >= 0.5 && secs < 900.0 && eff.backbone.steps <= 5000,
        format!(
            "{} train pairs, {} steps in {secs:.0}s; test PSNR input {psnr_in:.2} dB -> enhanced {psnr_out:.2} dB \
             ({:+.2}); val L_img {:.4} -> {:.4} ({:.0}% drop)",
            train.len(),
            eff.backbone.steps,
            psnr_out - psnr_in,
            outcome.initial_val_l_img,
            outcome.final_val_l_img,
            100.0 * drop
        ),
    ));

    let t0 = Instant::now();
    let ctl = train_controller(&net, &train, &eff.rollout, &eff.controller, &eff.ppo, &eff.reward, |_| {})
        .unwrap()
        .controller;
    let secs = t0.elapsed().as_secs_f64();
    let (rc, rw, b_max) = (&eff.rollout, &eff.reward, eff.controller.b_max);
    let learned = evaluate_policy(&net, &test_pairs, 20, rc, rw, 1, |_| {
        LearnedPolicy::new(&ctl, seeded_rng(0), DecodeMode::Greedy)
    })
    .unwrap();
    let uniform = evaluate_policy(&net, &test_pairs, 20, rc, rw, 1, |_| UniformPolicy { level: 1, b_max }).unwrap();
    let random = evaluate_policy(&net, &test_pairs, 20, rc, rw, 1, |i| RandomPolicy {
        rng: seeded_rng(i as u64),
        b_max,
    })
    .unwrap();
    let a = learned.mean_reward >= uniform.mean_reward && learned.mean_reward > random.mean_reward;
    let hot = learned.hot_fraction();
    let b = hot.is_some_and(|h| h >= 0.6);
    let hot_desc = hot.map_or("no tiles selected".to_string(), |h| format!("{:.0}% of {}", 100.0 * h, learned.selected_tiles));
    lines.push(line(
        "6",
        a && b && secs < 1200.0 && eff.ppo.n_episodes <= 300,
        format!(
            "(a) {} reward learned {:.4} uniform {:.4} random {:.4}; (b) {} hot fraction {hot_desc} \
             (uniform {:.0}%, random {:.0}%); {} episodes in {secs:.0}s, learned micro-steps {:.2}",
            if a { "ok" } else { "FAILED" },
            learned.mean_reward,
            uniform.mean_reward,
            random.mean_reward,
            if b { "ok" } else { "FAILED" },
            100.0 * uniform.hot_fraction().unwrap_or(0.0),
            100.0 * random.hot_fraction().unwrap_or(0.0),
            eff.ppo.n_episodes,
            learned.mean_micro_steps,
        ),
    ));

    let adaptive: Vec<_> = test
        .iter()
        .map(|(e, p)| enhance_pair(&net, Some(&ctl), p, &eff.rollout, pair_noise_seed(&cfg, e)).unwrap().output)
        .collect();
    let roi = |outs: &[ndarray::Array2<f64>]| {
        let m: Vec<_> = test.iter().zip(outs).map(|((_, p), x)| image_metrics(p, x).unwrap()).collect();
        (
            mean(m.iter().filter_map(|r| r.roi_psnr)),
            mean(m.iter().filter_map(|r| r.roi_ssim)),
        )
    };
    let (ra_p, ra_s) = roi(&adaptive);
    let (cmf_p, cmf_s) = roi(&baseline);
    lines.push(line(
        "7",
        ra_p >= cmf_p && ra_s >= cmf_s,
        format!("ROI PSNR RA-CMF {ra_p:.3} vs CMF {cmf_p:.3}; ROI SSIM {ra_s:.4} vs {cmf_s:.4}"),
    ));

    let nps = nps_comparison(&test, &adaptive, cfg.eval.nps_patch, cfg.eval.nps_fraction).unwrap();
    let d_enh = profile_distance(&nps.enhanced.power, &nps.target.power);
    let d_in = profile_distance(&nps.input.power, &nps.target.power);
    lines.push(line(
        "8",
        d_enh < d_in,
        format!("profile distance enhanced-target {d_enh:.3e} vs input-target {d_in:.3e} over {} patches", nps.target.n_patches),
    ));
    Toy { cfg, test, lines }
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

/// Every command twice on a reduced config; artifacts must match byte for byte.
fn criterion_9(tmp: &Path) -> Line {
    let sets: Vec<String> = [
        "data.n_pairs=6",
        "backbone.base_width=8",
        "backbone.depth=2",
        "backbone.embed_dim=8",
        "backbone.steps=30",
        "backbone.eval_every=10",
        "controller.feature_width=4",
        "ppo.n_episodes=8",
        "ppo.episodes_per_batch=4",
        "eval.split=\"train\"",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = load_config(None, &sets, None).unwrap();
    let mut quiet = |_: &str| {};
    let mut mismatches = Vec::new();
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.join(run);
        let data = cmd_gen_data(&cfg, &root.join("data")).unwrap().out_dir;
        let manifest = data.join("manifest.json");
        let bb = cmd_train_backbone(&cfg, &manifest, &root.join("bb"), &mut quiet).unwrap().out_dir;
        let backbone = bb.join(racmf::pipeline::BACKBONE_FILE);
        let ctl = cmd_train_controller(&cfg, &manifest, &backbone, &root.join("ctl"), &mut quiet).unwrap().out_dir;
        let controller = ctl.join(racmf::pipeline::CONTROLLER_FILE);
        let enh = cmd_enhance(&cfg, &manifest, &backbone, Some(&controller), Split::Train, &root.join("enh"))
            .unwrap()
            .out_dir;
        dirs.push((data, bb, ctl, enh));
    }
    let (a, b) = (&dirs[0], &dirs[1]);
    let mut files = vec![
        (a.0.join("manifest.json"), b.0.join("manifest.json")),
        (a.1.join(racmf::pipeline::LOSS_CSV), b.1.join(racmf::pipeline::LOSS_CSV)),
        (a.1.join(racmf::pipeline::BACKBONE_FILE), b.1.join(racmf::pipeline::BACKBONE_FILE)),
        (a.2.join(racmf::pipeline::REWARD_CSV), b.2.join(racmf::pipeline::REWARD_CSV)),
        (a.2.join(racmf::pipeline::CONTROLLER_FILE), b.2.join(racmf::pipeline::CONTROLLER_FILE)),
        (a.3.join(racmf::pipeline::EVAL_COUNTS_CSV), b.3.join(racmf::pipeline::EVAL_COUNTS_CSV)),
    ];
    for sub in ["enhanced", "pairs"] {
        let (da, db) = if sub == "pairs" { (&a.0, &b.0) } else { (&a.3, &b.3) };
        let Ok(entries) = fs::read_dir(da.join(sub)) else { continue };
        for e in entries {
            let name = e.unwrap().file_name();
            files.push((da.join(sub).join(&name), db.join(sub).join(&name)));
        }
    }
    for (x, y) in &files {
        if !same_bytes(x, y) {
            mismatches.push(x.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    line(
        "9",
        mismatches.is_empty(),
        format!("{} artifacts compared across two runs, mismatched {mismatches:?}", files.len()),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let toy = toy_scale(tmp.path());
    assert_eq!(toy.cfg.data.n_pairs, 64);
    assert!(!toy.test.is_empty());
    lines.extend(toy.lines);
    lines.push(criterion_9(&tmp.path().join("determinism")));
    lines.sort_by_key(|l| l.id);

    println!("\nsummary");
    for l in &lines {
        println!("  {} {}", l.id, if l.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| format!("{}: {}", l.id, l.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
