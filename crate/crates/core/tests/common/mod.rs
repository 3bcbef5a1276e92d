//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use racmf::cmf::oracle::{ConstantFlow, StateIdentityFlow};
use racmf::cmf::{meanflow_target, FlowModel, FlowNet, NetShape, TimePair};
use racmf::metrics::radiomics::{feature_vector, CATALOG};
use racmf::nn::seeded_rng;
use racmf::rollout::{
    coarse_step, enhance, enhance_baseline, make_schedule, Observation, Policy, RefinementAction, RolloutConfig,
    TileGrid,
};

pub fn normal_image(rng: &mut impl Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.sample(StandardNormal))
}

pub fn l2(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Time derivative of the network against central differences.

pub struct JvpCase {
    pub seed: u64,
    pub shape: NetShape,
    pub rel_err: f64,
}

/// Random small network and inputs; compares the forward-mode derivative of
/// `u` along `(v, 0, 1)` with `[u(x + hv, r, t + h) - u(x - hv, r, t - h)] / 2h`.
pub fn jvp_case(seed: u64, h: f64) -> JvpCase {
    let mut rng = seeded_rng(seed ^ 0x5EED);
    let depth = rng.random_range(2..=3);
    let shape = NetShape {
        base_width: [8, 12][rng.random_range(0..2)],
        depth,
        embed_dim: [8, 16][rng.random_range(0..2)],
    };
    let side = 8 * (1 << (depth - 1));
    let net = FlowNet::new(&shape, seed).unwrap();
    let x = normal_image(&mut rng, side, side);
    let x_a = normal_image(&mut rng, side, side);
    let v = normal_image(&mut rng, side, side);
    let t = rng.random_range(0.2..0.9);
    let r = rng.random_range(0.0..t - 2.0 * h);
    let (_, du) = net.flow_jvp(&x, &x_a, TimePair::new(r, t).unwrap(), &v).unwrap();
    let up = net.flow(&(&x + &(&v * h)), &x_a, TimePair::new(r, t + h).unwrap()).unwrap();
    let dn = net.flow(&(&x - &(&v * h)), &x_a, TimePair::new(r, t - h).unwrap()).unwrap();
    let fd = (up - dn) / (2.0 * h);
    JvpCase {
        seed,
        shape,
        rel_err: l2(&(&du - &fd)) / l2(&fd),
    }
}

// ---------------------------------------------------------------------------
// Closed-form MeanFlow targets.

/// Largest deviation from the three closed-form target identities over
/// `n` random draws.
pub fn meanflow_identity_errors(n: usize, seed: u64) -> [f64; 3] {
    let mut rng = seeded_rng(seed);
    let shape = NetShape {
        base_width: 8,
        depth: 2,
        embed_dim: 8,
    };
    let net = FlowNet::new(&shape, seed).unwrap();
    let mut worst = [0.0f64; 3];
    for _ in 0..n {
        let x = normal_image(&mut rng, 8, 8);
        let x_a = normal_image(&mut rng, 8, 8);
        let v = normal_image(&mut rng, 8, 8);
        let t: f64 = rng.random_range(0.0..=1.0);
        let r = rng.random_range(0.0..=t);

        let same = meanflow_target(&net, &x, &x_a, TimePair::new(t, t).unwrap(), &v).unwrap();
        worst[0] = worst[0].max(max_abs(&(&same - &v)));

        let c = rng.random_range(-2.0..2.0);
        let constant = meanflow_target(&ConstantFlow(c), &x, &x_a, TimePair::new(r, t).unwrap(), &v).unwrap();
        worst[1] = worst[1].max(max_abs(&(&constant - &v)));

        let ident = meanflow_target(&StateIdentityFlow, &x, &x_a, TimePair::new(r, t).unwrap(), &v).unwrap();
        let want = &v * (1.0 - (t - r));
        worst[2] = worst[2].max(max_abs(&(&ident - &want)));
    }
    worst
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

// ---------------------------------------------------------------------------
// Brute-force radiomic features.

/// A random ROI case: image, mask and bin count.
pub struct RoiCase {
    pub image: Array2<f64>,
    pub roi: Array2<bool>,
    pub n_levels: usize,
}

pub fn random_roi_case(rng: &mut impl Rng, side: usize) -> RoiCase {
    let n_levels = rng.random_range(2..=4);
    // Blocky intensities so that runs and zones longer than one pixel occur.
    let coarse: Vec<f64> = (0..16).map(|_| rng.random_range(0..4) as f64).collect();
    let image = Array2::from_shape_fn((side, side), |(y, x)| {
        coarse[(y / 2 % 4) * 4 + x / 2 % 4] + 0.3 * rng.random::<f64>()
    });
    let density = rng.random_range(0.5..1.0);
    let roi = Array2::from_shape_fn((side, side), |_| rng.random::<f64>() < density);
    RoiCase { image, roi, n_levels }
}

fn oracle_levels(image: &Array2<f64>, roi: &Array2<bool>, n: usize) -> Array2<usize> {
    let vals: Vec<f64> = image.iter().zip(roi).filter(|p| *p.1).map(|p| *p.0).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Array2::from_shape_fn(image.dim(), |p| {
        if !roi[p] {
            0
        } else if hi == lo {
            1
        } else {
            let l = ((image[p] - lo) / (hi - lo) * n as f64).floor() as usize + 1;
            l.clamp(1, n)
        }
    })
}

fn roi_pixels(levels: &Array2<usize>) -> Vec<((i64, i64), usize)> {
    levels
        .indexed_iter()
        .filter(|(_, &l)| l > 0)
        .map(|((y, x), &l)| ((y as i64, x as i64), l))
        .collect()
}

fn chebyshev1(a: (i64, i64), b: (i64, i64)) -> bool {
    a != b && (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1
}

fn first_order_oracle(image: &Array2<f64>, roi: &Array2<bool>, levels: &Array2<usize>, n: usize) -> [f64; 6] {
    let vals: Vec<f64> = image.iter().zip(roi).filter(|p| *p.1).map(|p| *p.0).collect();
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    let central = |p: i32| vals.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / k;
    let var = central(2);
    let (skew, kurt) = if var == 0.0 {
        (0.0, 0.0)
    } else {
        (central(3) / var.powf(1.5), central(4) / (var * var) - 3.0)
    };
    let energy = vals.iter().map(|v| v * v).sum();
    let mut entropy = 0.0;
    for level in 1..=n {
        let c = levels.iter().filter(|&&l| l == level).count() as f64;
        if c > 0.0 {
            let p = c / k;
            entropy -= p * p.log2();
        }
    }
    [mean, var, skew, kurt, energy, entropy]
}

/// Every ordered pixel pair is inspected; pairs at `±offset` are counted.
fn glcm_oracle(levels: &Array2<usize>, n: usize) -> Option<[f64; 4]> {
    let px = roi_pixels(levels);
    let mut mats = Vec::new();
    for (dy, dx) in [(0i64, 1i64), (1, 0), (1, 1), (1, -1)] {
        let mut m = vec![vec![0.0; n]; n];
        let mut total = 0.0;
        for &(a, la) in &px {
            for &(b, lb) in &px {
                let d = (b.0 - a.0, b.1 - a.1);
                if d == (dy, dx) || d == (-dy, -dx) {
                    m[la - 1][lb - 1] += 1.0;
                    total += 1.0;
                }
            }
        }
        if total > 0.0 {
            m.iter_mut().flatten().for_each(|v| *v /= total);
            mats.push(m);
        }
    }
    if mats.is_empty() {
        return None;
    }
    let k = mats.len() as f64;
    let p: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| mats.iter().map(|m| m[i][j]).sum::<f64>() / k).collect())
        .collect();
    let gi = |i: usize| (i + 1) as f64;
    let row: Vec<f64> = (0..n).map(|i| p[i].iter().sum()).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| p[i][j]).sum()).collect();
    let mx: f64 = (0..n).map(|i| gi(i) * row[i]).sum();
    let my: f64 = (0..n).map(|j| gi(j) * col[j]).sum();
    let sx = (0..n).map(|i| (gi(i) - mx).powi(2) * row[i]).sum::<f64>().sqrt();
    let sy = (0..n).map(|j| (gi(j) - my).powi(2) * col[j]).sum::<f64>().sqrt();
    let (mut contrast, mut cov, mut energy, mut homog) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let d = gi(i) - gi(j);
            contrast += d * d * p[i][j];
            cov += (gi(i) - mx) * (gi(j) - my) * p[i][j];
            energy += p[i][j] * p[i][j];
            homog += p[i][j] / (1.0 + d * d);
        }
    }
    let corr = if sx * sy == 0.0 { 1.0 } else { cov / (sx * sy) };
    Some([contrast, corr, energy, homog])
}

/// Walks every full image line in each direction and splits it into maximal
/// runs of equal in-ROI levels.
fn glrlm_oracle(levels: &Array2<usize>) -> [f64; 5] {
    let (h, w) = (levels.nrows() as i64, levels.ncols() as i64);
    let np = roi_pixels(levels).len() as f64;
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w;
    let mut acc = [0.0; 5];
    for (dy, dx) in [(0i64, 1i64), (-1, 1), (1, 0), (1, 1)] {
        let mut runs: HashMap<(usize, usize), f64> = HashMap::new();
        for y in 0..h {
            for x in 0..w {
                if inside(y - dy, x - dx) {
                    continue;
                }
                let mut line = Vec::new();
                let (mut cy, mut cx) = (y, x);
                while inside(cy, cx) {
                    line.push(levels[[cy as usize, cx as usize]]);
                    cy += dy;
                    cx += dx;
                }
                let mut i = 0;
                while i < line.len() {
                    let mut j = i;
                    while j < line.len() && line[j] == line[i] {
                        j += 1;
                    }
                    if line[i] > 0 {
                        *runs.entry((line[i], j - i)).or_default() += 1.0;
                    }
                    i = j;
                }
            }
        }
        let nr: f64 = runs.values().sum();
        let mut by_level: HashMap<usize, f64> = HashMap::new();
        let mut by_len: HashMap<usize, f64> = HashMap::new();
        let (mut sre, mut lre) = (0.0, 0.0);
        for (&(l, len), &c) in &runs {
            let lf = len as f64;
            sre += c / (lf * lf);
            lre += c * lf * lf;
            *by_level.entry(l).or_default() += c;
            *by_len.entry(len).or_default() += c;
        }
        acc[0] += sre / nr;
        acc[1] += lre / nr;
        acc[2] += by_level.values().map(|c| c * c).sum::<f64>() / nr;
        acc[3] += by_len.values().map(|c| c * c).sum::<f64>() / nr;
        acc[4] += nr / np;
    }
    acc.map(|v| v / 4.0)
}

/// Zones by union-find over all pixel pairs.
fn glszm_oracle(levels: &Array2<usize>) -> [f64; 3] {
    let px = roi_pixels(levels);
    let mut parent: Vec<usize> = (0..px.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..px.len() {
        for b in a + 1..px.len() {
            if px[a].1 == px[b].1 && chebyshev1(px[a].0, px[b].0) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let mut sizes: HashMap<usize, f64> = HashMap::new();
    for i in 0..px.len() {
        let r = find(&mut parent, i);
        *sizes.entry(r).or_default() += 1.0;
    }
    let nz = sizes.len() as f64;
    let sze = sizes.values().map(|s| 1.0 / (s * s)).sum::<f64>() / nz;
    let lze = sizes.values().map(|s| s * s).sum::<f64>() / nz;
    [sze, lze, nz / px.len() as f64]
}

fn gldm_oracle(levels: &Array2<usize>) -> [f64; 3] {
    let px = roi_pixels(levels);
    let mut by_dep: HashMap<usize, f64> = HashMap::new();
    for &(a, la) in &px {
        let dep = 1 + px.iter().filter(|&&(b, lb)| lb == la && chebyshev1(a, b)).count();
        *by_dep.entry(dep).or_default() += 1.0;
    }
    let n = px.len() as f64;
    let sde = by_dep.iter().map(|(&d, &c)| c / (d * d) as f64).sum::<f64>() / n;
    let lde = by_dep.iter().map(|(&d, &c)| c * (d * d) as f64).sum::<f64>() / n;
    let dn = by_dep.values().map(|c| c * c).sum::<f64>() / n;
    [sde, lde, dn]
}

fn ngtdm_oracle(levels: &Array2<usize>, n: usize) -> Option<[f64; 3]> {
    let px = roi_pixels(levels);
    let mut s = vec![0.0; n + 1];
    let mut cnt = vec![0.0; n + 1];
    for &(a, la) in &px {
        let neigh: Vec<f64> = px
            .iter()
            .filter(|&&(b, _)| chebyshev1(a, b))
            .map(|&(_, lb)| lb as f64)
            .collect();
        if neigh.is_empty() {
            continue;
        }
        let avg = neigh.iter().sum::<f64>() / neigh.len() as f64;
        s[la] += (la as f64 - avg).abs();
        cnt[la] += 1.0;
    }
    let nvp: f64 = cnt.iter().sum();
    if nvp == 0.0 {
        return None;
    }
    let p: Vec<f64> = cnt.iter().map(|c| c / nvp).collect();
    let occupied: Vec<usize> = (1..=n).filter(|&i| cnt[i] > 0.0).collect();
    let sum_ps: f64 = occupied.iter().map(|&i| p[i] * s[i]).sum();
    let coarseness = 1.0 / (sum_ps + 1e-8);
    let g = occupied.len() as f64;
    let contrast = if occupied.len() < 2 {
        0.0
    } else {
        let mut acc = 0.0;
        for &i in &occupied {
            for &j in &occupied {
                acc += p[i] * p[j] * ((i as f64) - (j as f64)).powi(2);
            }
        }
        acc / (g * (g - 1.0)) * (s.iter().sum::<f64>() / nvp)
    };
    let mut denom = 0.0;
    for &i in &occupied {
        for &j in &occupied {
            denom += (i as f64 * p[i] - j as f64 * p[j]).abs();
        }
    }
    let busyness = if denom == 0.0 { 0.0 } else { sum_ps / denom };
    Some([coarseness, contrast, busyness])
}

/// All 24 catalog features by naive enumeration; `None` when a family is
/// undefined for the ROI.
pub fn oracle_features(image: &Array2<f64>, roi: &Array2<bool>, n: usize) -> Option<Vec<f64>> {
    if !roi.iter().any(|&m| m) {
        return None;
    }
    let levels = oracle_levels(image, roi, n);
    let mut out = Vec::with_capacity(24);
    out.extend(first_order_oracle(image, roi, &levels, n));
    out.extend(glcm_oracle(&levels, n)?);
    out.extend(glrlm_oracle(&levels));
    out.extend(glszm_oracle(&levels));
    out.extend(gldm_oracle(&levels));
    out.extend(ngtdm_oracle(&levels, n)?);
    Some(out)
}

/// Worst absolute gap between library and oracle over `n_cases` random ROIs,
/// with the feature where it occurred.
pub fn radiomics_oracle_gap(n_cases: usize, side: usize, seed: u64) -> (f64, &'static str, usize) {
    let mut rng = seeded_rng(seed);
    let mut worst = (0.0, CATALOG[0]);
    let mut done = 0;
    while done < n_cases {
        let case = random_roi_case(&mut rng, side);
        let lib = feature_vector(&case.image, &case.roi, case.n_levels);
        let ora = oracle_features(&case.image, &case.roi, case.n_levels);
        match (lib, ora) {
            (Ok(l), Some(o)) => {
                for (i, (a, b)) in l.values.iter().zip(&o).enumerate() {
                    let gap = (a - b).abs();
                    if gap > worst.0 || gap.is_nan() {
                        worst = (gap, CATALOG[i]);
                    }
                }
                done += 1;
            }
            (Err(_), None) => {}
            (l, o) => panic!("library and oracle disagree on definedness: {:?} vs {:?}", l.err(), o),
        }
    }
    (worst.0, worst.1, done)
}

// ---------------------------------------------------------------------------
// Rollout locality and budget accounting.

/// Fully random valid actions, occasionally stopping.
pub struct RandomActions<R: Rng> {
    pub rng: R,
    pub b_max: usize,
    pub stop_prob: f64,
}

impl<R: Rng> Policy for RandomActions<R> {
    fn act(&mut self, obs: &Observation<'_>) -> racmf::Result<RefinementAction> {
        let dims = obs.grid.dims();
        let mut a = RefinementAction::empty(obs.grid);
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                if self.rng.random::<bool>() {
                    a.tile_select[[r, c]] = 1.0;
                    a.tile_budget[[r, c]] = self.rng.random_range(0..=obs.m_max);
                }
                a.tile_priority[[r, c]] = self.rng.random();
            }
        }
        a.global_budget = self.rng.random_range(0..=self.b_max);
        a.stop = self.rng.random::<f64>() < self.stop_prob;
        Ok(a)
    }
}

pub fn small_net(seed: u64) -> FlowNet {
    FlowNet::new(
        &NetShape {
            base_width: 8,
            depth: 2,
            embed_dim: 8,
        },
        seed,
    )
    .unwrap()
}

/// Runs random-action rollouts until `n_actions` decisions have been
/// checked; returns the number checked or the first violated law.
pub fn check_rollout_laws(n_actions: usize, seed: u64) -> Result<usize, String> {
    let net = small_net(seed);
    let mut rng = seeded_rng(seed);
    let config = RolloutConfig {
        k_steps: 4,
        tile_size: 4,
        m_max: 3,
        gamma_local: 0.25,
        feather: false,
        init_seed: 0,
    };
    let (h, w) = (16, 16);
    let grid = TileGrid::new(h, w, config.tile_size).unwrap();
    let schedule = make_schedule(config.k_steps).unwrap();
    let body = Array2::ones((h, w));
    let mut checked = 0;
    let mut episode = 0u64;
    while checked < n_actions {
        let x_a = normal_image(&mut rng, h, w);
        let policy = RandomActions {
            rng: seeded_rng(seed.wrapping_add(episode)),
            b_max: 16,
            stop_prob: 0.1,
        };
        let res = enhance(&net, Some(policy), &x_a, &body, &config, episode).map_err(|e| e.to_string())?;
        for st in &res.trace.steps {
            let k = st.k;
            let (t_k, t_next) = schedule.interval(k);
            let (x_coarse, _) = coarse_step(&net, &res.states[k], &x_a, t_k, t_next).map_err(|e| e.to_string())?;
            let after = &res.states[k + 1];
            for ((y, x), v) in after.indexed_iter() {
                let (r, c) = grid.tile_of(y, x);
                let granted = st.granted_budget[r * grid.n_cols + c];
                if (granted == 0 || st.stop) && v.to_bits() != x_coarse[[y, x]].to_bits() {
                    return Err(format!("episode {episode} step {k}: unmasked pixel ({y},{x}) changed"));
                }
            }
            let max_granted = st.granted_budget.iter().copied().max().unwrap_or(0);
            if st.tile_steps > st.global_budget {
                return Err(format!("step {k}: {} tile-steps exceed global budget {}", st.tile_steps, st.global_budget));
            }
            if st.executed_micro_steps > st.global_budget || st.executed_micro_steps > config.m_max {
                return Err(format!("step {k}: {} micro-steps exceed the budgets", st.executed_micro_steps));
            }
            for (i, (&g, &b)) in st.granted_budget.iter().zip(&st.tile_budget).enumerate() {
                if g > b || (st.tile_select[i] == 0.0 && g > 0) {
                    return Err(format!("step {k}: tile {i} granted {g} over request {b}"));
                }
            }
            let expect_exec = if st.stop { 0 } else { max_granted };
            if st.executed_micro_steps != expect_exec || st.eval_count != 1 + st.executed_micro_steps {
                return Err(format!("step {k}: evaluation accounting broken"));
            }
            checked += 1;
        }
        episode += 1;
    }
    Ok(checked)
}

/// Zero-budget and policy-free rollouts must agree bit for bit.
pub fn zero_budget_matches_baseline(n: usize, seed: u64) -> Result<(), String> {
    let net = small_net(seed);
    let mut rng = seeded_rng(seed);
    let config = RolloutConfig::default();
    for i in 0..n as u64 {
        let x_a = normal_image(&mut rng, 16, 16);
        let body = Array2::ones((16, 16));
        let a = enhance(&net, Some(racmf::controller::ZeroBudgetPolicy), &x_a, &body, &config, i).unwrap();
        let b = enhance_baseline(&net, &x_a, &body, &config, i).unwrap();
        if a.output.iter().zip(&b.output).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Err(format!("rollout {i}: zero-budget output differs from baseline"));
        }
        if a.trace.total_eval_count != b.trace.total_eval_count {
            return Err(format!("rollout {i}: evaluation counts differ"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Closed-form metric cases.

/// `(description, passed)` for the hand-computed PSNR, SSIM, CCC and NPS cases.
pub fn metric_hand_cases() -> Vec<(&'static str, bool)> {
    use racmf::metrics::quality::psnr_from_mse;
    use racmf::metrics::{ccc, nps, psnr, ssim};
    let mut out = Vec::new();
    let x = Array2::from_elem((4, 4), 0.3);
    let p = psnr(&x, &x, 1.0).unwrap();
    out.push(("psnr identity is capped at 60 dB and flagged", p.db == 60.0 && p.exact));
    out.push(("psnr MAX=1, MSE=0.01 gives 20 dB", (psnr_from_mse(0.01, 1.0).unwrap().db - 20.0).abs() < 1e-12));
    let a = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
    let b = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
    out.push(("psnr of swapped [0,1] is 0 dB", psnr(&a, &b, 1.0).unwrap().db == 0.0));

    let mut rng = seeded_rng(11);
    let r1 = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..1.0));
    let r2 = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..1.0));
    out.push(("ssim identity is 1", (ssim(&r1, &r1, 1.0).unwrap() - 1.0).abs() < 1e-12));
    let closed = (2.0 * 0.5 * 0.25 + 1e-4) / (0.5f64.powi(2) + 0.25f64.powi(2) + 1e-4);
    let s = ssim(&Array2::from_elem((16, 16), 0.5), &Array2::from_elem((16, 16), 0.25), 1.0).unwrap();
    out.push(("ssim of constants 0.5/0.25 matches the closed form", (s - closed).abs() < 1e-12 && (s - 0.8003).abs() < 5e-4));
    out.push(("ssim is symmetric", (ssim(&r1, &r2, 1.0).unwrap() - ssim(&r2, &r1, 1.0).unwrap()).abs() < 1e-15));

    out.push(("ccc of identical series is 1", ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() == 1.0));
    out.push(("ccc of reversed series is -1", (ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15));
    out.push(("ccc of [0,0,0] vs [1,1,1] is 0", ccc(&[0.0; 3], &[1.0; 3]).unwrap() == 0.0));

    // Exact Parseval: mean spectrum equals mean per-patch variance.
    let patches: Vec<Array2<f64>> = (0..4).map(|_| normal_image(&mut rng, 16, 16)).collect();
    let prof = nps(&patches).unwrap();
    let var = patches
        .iter()
        .map(|q| {
            let m = q.mean().unwrap();
            q.iter().map(|v| (v - m).powi(2)).sum::<f64>() / q.len() as f64
        })
        .sum::<f64>()
        / patches.len() as f64;
    out.push(("nps Parseval on exact inputs within 1e-6", (prof.spectrum.mean().unwrap() - var).abs() < 1e-6));
    // Monte-Carlo: white noise of sigma 0.1.
    let noise: Vec<Array2<f64>> = (0..60).map(|_| normal_image(&mut rng, 64, 64) * 0.1).collect();
    let mc = nps(&noise).unwrap().spectrum.mean().unwrap();
    out.push(("nps of white noise recovers sigma^2 within 10%", ((mc - 0.01) / 0.01).abs() < 0.1));
    out
}
