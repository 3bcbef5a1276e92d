//! Controller training against a frozen backbone: quality score, step
//! rewards, GAE, and the PPO clipped-surrogate update.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmf::FlowModel;
use crate::cmf::FlowNet;
use crate::controller::{head_grads, Controller, DecisionRecord, DecodeMode, LearnedPolicy, StateFeatures};
use crate::error::{Error, Result};
use crate::metrics::quality::{focus_measure, psnr, shift_signed, ssim, PSNR_CAP_DB, SIGNED_RANGE};
use crate::nn::{seeded_rng, Adam, Grads, Tape, Tensor};
use crate::rollout::{enhance, Policy, RefinementAction, RolloutConfig, RolloutResult, TileGrid};
use crate::synth::{mix_seed, ImagePair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Cost per executed micro-step.
    pub alpha: f64,
    pub psnr_scale: f64,
    pub ssim_weight: f64,
    pub focus_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            psnr_scale: 40.0,
            ssim_weight: 1.0,
            focus_weight: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("ssim_weight", self.ssim_weight),
            ("focus_weight", self.focus_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::spec(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.psnr_scale > 0.0 && self.psnr_scale.is_finite()) {
            return Err(Error::spec("psnr_scale", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gae_lambda: f64,
    pub discount_gamma: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub n_episodes: usize,
    /// Episodes collected between updates.
    pub episodes_per_batch: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gae_lambda: 0.95,
            discount_gamma: 0.99,
            epochs_per_batch: 4,
            minibatch_size: 16,
            learning_rate: 1e-3,
            entropy_coef: 0.01,
            value_coef: 0.5,
            n_episodes: 300,
            episodes_per_batch: 8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::spec("clip_epsilon", "must be > 0"));
        }
        for (name, v) in [("gae_lambda", self.gae_lambda), ("discount_gamma", self.discount_gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::spec(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("epochs_per_batch", self.epochs_per_batch),
            ("minibatch_size", self.minibatch_size),
            ("n_episodes", self.n_episodes),
            ("episodes_per_batch", self.episodes_per_batch),
        ] {
            if v == 0 {
                return Err(Error::spec(name, "must be >= 1"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::spec("learning_rate", "must be > 0"));
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::spec(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `min(PSNR, 60)/psnr_scale + β·SSIM − κ·|FG(x) − FG(x_B)|` for `[-1, 1]` images.
pub fn quality_score(x: &Array2<f64>, x_b: &Array2<f64>, body_mask: &Array2<f64>, cfg: &RewardConfig) -> Result<f64> {
    let p = psnr(x, x_b, SIGNED_RANGE)?.db.min(PSNR_CAP_DB);
    let mut q = p / cfg.psnr_scale;
    if cfg.ssim_weight != 0.0 {
        q += cfg.ssim_weight * ssim(&shift_signed(x), &shift_signed(x_b), SIGNED_RANGE)?;
    }
    if cfg.focus_weight != 0.0 {
        q -= cfg.focus_weight * (focus_measure(x, body_mask)? - focus_measure(x_b, body_mask)?).abs();
    }
    Ok(q)
}

/// `r_k = ΔQ − α · executed micro-steps`.
pub fn reward_from_scores(q_prev: f64, q_next: f64, executed_micro_steps: usize, cfg: &RewardConfig) -> f64 {
    q_next - q_prev - cfg.alpha * executed_micro_steps as f64
}

pub fn step_reward(
    x_k: &Array2<f64>,
    x_next: &Array2<f64>,
    x_b: &Array2<f64>,
    body_mask: &Array2<f64>,
    executed_micro_steps: usize,
    cfg: &RewardConfig,
) -> Result<f64> {
    let q0 = quality_score(x_k, x_b, body_mask, cfg)?;
    let q1 = quality_score(x_next, x_b, body_mask, cfg)?;
    Ok(reward_from_scores(q0, q1, executed_micro_steps, cfg))
}

/// Per-step rewards of a finished rollout.
pub fn rollout_rewards(result: &RolloutResult, x_b: &Array2<f64>, body_mask: &Array2<f64>, cfg: &RewardConfig) -> Result<Vec<f64>> {
    let scores: Vec<f64> = result
        .states
        .iter()
        .map(|s| quality_score(s, x_b, body_mask, cfg))
        .collect::<Result<_>>()?;
    Ok(result
        .trace
        .steps
        .iter()
        .enumerate()
        .map(|(k, st)| reward_from_scores(scores[k], scores[k + 1], st.executed_micro_steps, cfg))
        .collect())
}

#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub features: StateFeatures,
    pub action: RefinementAction,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// The last step ends the episode (no bootstrap).
    pub terminal: bool,
}

impl Trajectory {
    pub fn from_records(records: Vec<DecisionRecord>, rewards: &[f64], terminal: bool) -> Result<Self> {
        if records.len() != rewards.len() {
            return Err(Error::Contract(format!(
                "{} decisions but {} rewards",
                records.len(),
                rewards.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::Numerical(format!("non-finite reward {r}")));
        }
        let steps = records
            .into_iter()
            .zip(rewards)
            .map(|(d, &reward)| TrajectoryStep {
                features: d.features,
                action: d.action,
                log_prob: d.log_prob,
                value: d.value,
                reward,
            })
            .collect();
        Ok(Self { steps, terminal })
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// GAE advantages and returns for one trajectory. Unnormalized.
pub fn compute_advantages(traj: &Trajectory, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = traj.steps.iter().map(|s| s.value).collect();
    gae(&rewards, &values, traj.terminal, cfg.discount_gamma, cfg.gae_lambda)
}

/// Generalized advantage estimation. A non-terminal tail bootstraps from the
/// last value estimate.
pub fn gae(rewards: &[f64], values: &[f64], terminal: bool, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for k in (0..n).rev() {
        let next_value = if k + 1 < n {
            values[k + 1]
        } else if terminal {
            0.0
        } else {
            values[k]
        };
        let delta = rewards[k] + gamma * next_value - values[k];
        next_adv = delta + gamma * lambda * next_adv;
        adv[k] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero mean, unit variance; left unchanged for a single element.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
}

/// Clipped surrogate `−min(ρA, clip(ρ, 1−ε, 1+ε)A)` and its derivative in ρ.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (-unclipped, -adv)
    } else {
        (-clipped, 0.0)
    }
}

/// One stored decision with its advantage target.
#[derive(Clone, Debug)]
pub struct PpoSample {
    pub features: StateFeatures,
    pub action: RefinementAction,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    /// Mean probability ratio over the minibatch.
    pub mean_ratio: f64,
    /// Largest `|log π_new − log π_old|` in the minibatch.
    pub max_log_ratio: f64,
}

/// Loss and parameter gradients for one minibatch.
pub fn ppo_loss_and_grads(
    ctl: &Controller,
    batch: &[&PpoSample],
    tile_size: usize,
    cfg: &PpoConfig,
) -> Result<(PpoLoss, Grads)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Precondition("empty PPO minibatch".into()));
    }
    let feats: Vec<&StateFeatures> = batch.iter().map(|s| &s.features).collect();
    let mut tape = Tape::new(ctl.params());
    let heads = ctl.forward_tape(&mut tape, &feats, tile_size);
    use crate::nn::Graph;
    let (sp, gl, vl) = (
        tape.value(&heads.spatial).clone(),
        tape.value(&heads.global).clone(),
        tape.value(&heads.value).clone(),
    );
    let nf = n as f64;
    let mut seed_s = vec![0.0; sp.len()];
    let mut seed_g = vec![0.0; gl.len()];
    let mut seed_v = vec![0.0; vl.len()];
    let s_stride = sp.len() / n;
    let g_stride = gl.len() / n;
    let mut loss = PpoLoss::default();
    for (i, s) in batch.iter().enumerate() {
        let (dist, value) = ctl.decode(&sp, &gl, &vl, i)?;
        let (lp, ent) = crate::controller::log_prob_and_entropy(&dist, &s.action);
        loss.max_log_ratio = loss.max_log_ratio.max((lp - s.old_log_prob).abs());
        let ratio = (lp - s.old_log_prob).exp();
        let (pl, dpl) = clipped_surrogate(ratio, s.advantage, cfg.clip_epsilon);
        loss.policy += pl / nf;
        loss.value += (value - s.ret).powi(2) / nf;
        loss.entropy += ent / nf;
        loss.mean_ratio += ratio / nf;
        let (g_lp, g_h) = head_grads(&dist, &s.action);
        // d/dz of policy term: dpl/dρ · ρ · dlogπ/dz
        let c_lp = dpl * ratio / nf;
        let c_h = -cfg.entropy_coef / nf;
        for (j, (a, b)) in g_lp.spatial.iter().zip(&g_h.spatial).enumerate() {
            seed_s[i * s_stride + j] = c_lp * a + c_h * b;
        }
        for (j, (a, b)) in g_lp.global.iter().zip(&g_h.global).enumerate() {
            seed_g[i * g_stride + j] = c_lp * a + c_h * b;
        }
        seed_v[i] = cfg.value_coef * 2.0 * (value - s.ret) / nf;
    }
    loss.total = loss.policy + cfg.value_coef * loss.value - cfg.entropy_coef * loss.entropy;
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!(
            "PPO loss is not finite (policy {}, value {}, entropy {})",
            loss.policy, loss.value, loss.entropy
        )));
    }
    let mut grads = Grads::zeros_like(ctl.params());
    tape.backward(
        vec![
            (heads.spatial, Tensor::from_vec(sp.shape(), seed_s)),
            (heads.global, Tensor::from_vec(gl.shape(), seed_g)),
            (heads.value, Tensor::from_vec(vl.shape(), seed_v)),
        ],
        &mut grads,
    );
    Ok((loss, grads))
}

/// Shuffled minibatch passes over `samples`; advantages are normalized over
/// the whole batch first. Returns the loss of every minibatch step.
pub fn ppo_update(
    ctl: &mut Controller,
    adam: &mut Adam,
    samples: &[PpoSample],
    tile_size: usize,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PpoLoss>> {
    let mut norm: Vec<PpoSample> = samples.to_vec();
    let mut adv: Vec<f64> = norm.iter().map(|s| s.advantage).collect();
    normalize_advantages(&mut adv);
    norm.iter_mut().zip(adv).for_each(|(s, a)| s.advantage = a);
    let mut order: Vec<usize> = (0..norm.len()).collect();
    let mut out = Vec::new();
    for _ in 0..cfg.epochs_per_batch {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let batch: Vec<&PpoSample> = chunk.iter().map(|&i| &norm[i]).collect();
            let (loss, mut grads) = ppo_loss_and_grads(ctl, &batch, tile_size, cfg)?;
            if !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite controller gradient (loss {:?})",
                    loss
                )));
            }
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip);
            }
            adam.step(ctl.params_mut(), &grads);
            out.push(loss);
        }
    }
    Ok(out)
}

/// One row of the reward history, aggregated over an update batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    /// Index of the last episode in the batch.
    pub episode: usize,
    /// Mean episode return.
    pub mean_reward: f64,
    pub mean_episode_length: f64,
    pub mean_micro_steps: f64,
}

pub struct ControllerOutcome {
    pub controller: Controller,
    pub history: Vec<RewardRecord>,
}

pub struct Episode {
    pub trajectory: Trajectory,
    pub micro_steps: usize,
}

/// Runs one stochastic episode of `ctl` on `pair`.
pub fn collect_episode(
    net: &impl FlowModel,
    ctl: &Controller,
    pair: &ImagePair,
    rollout: &RolloutConfig,
    reward: &RewardConfig,
    policy_seed: u64,
    noise_seed: u64,
) -> Result<Episode> {
    let x_a = pair.source_f64();
    let x_b = pair.target_f64();
    let body = pair.body_mask.mapv(f64::from);
    let mut policy = LearnedPolicy::new(ctl, seeded_rng(policy_seed), DecodeMode::Sample);
    let result = enhance(net, Some(&mut policy), &x_a, &body, rollout, noise_seed)?;
    let rewards = rollout_rewards(&result, &x_b, &body, reward)?;
    Ok(Episode {
        trajectory: Trajectory::from_records(policy.record, &rewards, true)?,
        micro_steps: result.trace.total_micro_steps,
    })
}

/// PPO training of a fresh controller on `train` while `net` stays frozen.
pub fn train_controller(
    net: &FlowNet,
    train: &[ImagePair],
    rollout: &RolloutConfig,
    ctl_config: &crate::controller::ControllerConfig,
    ppo: &PpoConfig,
    reward: &RewardConfig,
    mut on_record: impl FnMut(&RewardRecord),
) -> Result<ControllerOutcome> {
    rollout.validate()?;
    ppo.validate()?;
    reward.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("controller training needs a nonempty split".into()));
    }
    if ctl_config.m_max != rollout.m_max {
        return Err(Error::spec(
            "controller.m_max",
            format!("must equal rollout.m_max ({})", rollout.m_max),
        ));
    }
    let before = net.params().checksum();
    let mut ctl = Controller::new(ctl_config)?;
    let mut adam = Adam::new(ctl.params(), ppo.learning_rate);
    let mut rng = seeded_rng(mix_seed(ppo.seed, 0x99F0));
    let mut history = Vec::new();
    let mut episode = 0;
    while episode < ppo.n_episodes {
        let n_batch = ppo.episodes_per_batch.min(ppo.n_episodes - episode);
        let mut samples = Vec::new();
        let (mut sum_r, mut sum_len, mut sum_micro) = (0.0, 0.0, 0.0);
        for _ in 0..n_batch {
            let pair = &train[rng.random_range(0..train.len())];
            let (ps, ns) = (rng.random::<u64>(), rng.random::<u64>());
            let ep = collect_episode(net, &ctl, pair, rollout, reward, ps, ns)?;
            let (adv, ret) = compute_advantages(&ep.trajectory, ppo);
            sum_r += ep.trajectory.total_reward();
            sum_len += ep.trajectory.steps.len() as f64;
            sum_micro += ep.micro_steps as f64;
            for ((st, a), r) in ep.trajectory.steps.into_iter().zip(adv).zip(ret) {
                samples.push(PpoSample {
                    features: st.features,
                    action: st.action,
                    old_log_prob: st.log_prob,
                    advantage: a,
                    ret: r,
                });
            }
        }
        episode += n_batch;
        ppo_update(&mut ctl, &mut adam, &samples, rollout.tile_size, ppo, &mut rng)?;
        let nb = n_batch as f64;
        let rec = RewardRecord {
            episode: episode - 1,
            mean_reward: sum_r / nb,
            mean_episode_length: sum_len / nb,
            mean_micro_steps: sum_micro / nb,
        };
        on_record(&rec);
        history.push(rec);
    }
    if net.params().checksum() != before {
        return Err(Error::Contract("backbone parameters changed during controller training".into()));
    }
    Ok(ControllerOutcome { controller: ctl, history })
}

/// Aggregate behaviour of a policy over evaluation rollouts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub mean_reward: f64,
    pub mean_micro_steps: f64,
    pub mean_eval_count: f64,
    /// Selected tiles summed over all steps and rollouts.
    pub selected_tiles: usize,
    /// Of those, tiles in the top quartile of per-tile source error.
    pub selected_in_hot: usize,
}

impl PolicyEvaluation {
    pub fn hot_fraction(&self) -> Option<f64> {
        (self.selected_tiles > 0).then(|| self.selected_in_hot as f64 / self.selected_tiles as f64)
    }
}

/// Tiles whose mean squared source error is in the top quartile
/// (at least the `ceil(n/4)` worst tiles, ties included).
pub fn hot_tiles(pair: &ImagePair, grid: &TileGrid) -> Array2<bool> {
    let err = (pair.source_f64() - pair.target_f64()).mapv(|d| d * d);
    let means = grid.tile_means(&err);
    let mut sorted: Vec<f64> = means.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let cut = sorted[sorted.len().div_ceil(4) - 1];
    means.mapv(|m| m >= cut)
}

/// Runs `make_policy(i)` on rollout `i` over `pairs` (cycled) and aggregates
/// rewards and tile placement.
pub fn evaluate_policy<P: Policy>(
    net: &impl FlowModel,
    pairs: &[ImagePair],
    n_rollouts: usize,
    rollout: &RolloutConfig,
    reward: &RewardConfig,
    seed: u64,
    mut make_policy: impl FnMut(usize) -> P,
) -> Result<PolicyEvaluation> {
    if pairs.is_empty() || n_rollouts == 0 {
        return Err(Error::Precondition("evaluation needs pairs and >= 1 rollout".into()));
    }
    let mut ev = PolicyEvaluation::default();
    for i in 0..n_rollouts {
        let pair = &pairs[i % pairs.len()];
        let x_a = pair.source_f64();
        let x_b = pair.target_f64();
        let body = pair.body_mask.mapv(f64::from);
        let res = enhance(net, Some(make_policy(i)), &x_a, &body, rollout, mix_seed(seed, i as u64))?;
        let rewards = rollout_rewards(&res, &x_b, &body, reward)?;
        ev.mean_reward += rewards.iter().sum::<f64>();
        ev.mean_micro_steps += res.trace.total_micro_steps as f64;
        ev.mean_eval_count += res.trace.total_eval_count as f64;
        let grid = TileGrid::new(x_a.nrows(), x_a.ncols(), rollout.tile_size)?;
        let hot = hot_tiles(pair, &grid);
        for st in &res.trace.steps {
            for (g, h) in st.tile_select.iter().zip(hot.iter()) {
                if *g > 0.0 {
                    ev.selected_tiles += 1;
                    ev.selected_in_hot += usize::from(*h);
                }
            }
        }
    }
    let n = n_rollouts as f64;
    ev.mean_reward /= n;
    ev.mean_micro_steps /= n;
    ev.mean_eval_count /= n;
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{sample_action, ControllerConfig};
    use crate::nn::ParamStore;
    use approx::assert_relative_eq;

    #[test]
    fn quality_examples() {
        let mut rng = seeded_rng(0);
        let x = Array2::from_shape_fn((16, 16), |_| rng.random_range(-1.0..1.0));
        let mask = Array2::ones((16, 16));
        let cfg = RewardConfig::default();
        assert_relative_eq!(quality_score(&x, &x, &mask, &cfg).unwrap(), 2.5, epsilon = 1e-12);
        let plain = RewardConfig {
            ssim_weight: 0.0,
            focus_weight: 0.0,
            ..cfg.clone()
        };
        let y = &x + 0.1;
        let want = psnr(&y, &x, 2.0).unwrap().db / 40.0;
        assert_relative_eq!(quality_score(&y, &x, &mask, &plain).unwrap(), want, epsilon = 1e-12);
        let closer = &x + 0.05;
        assert!(quality_score(&closer, &x, &mask, &plain).unwrap() > quality_score(&y, &x, &mask, &plain).unwrap());
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        assert_relative_eq!(reward_from_scores(1.0, 1.1, 2, &cfg), 0.08, epsilon = 1e-12);
        assert_relative_eq!(reward_from_scores(1.0, 1.0, 5, &cfg), -0.05, epsilon = 1e-12);
        let x = Array2::from_elem((16, 16), 0.2);
        let b = Array2::from_elem((16, 16), 0.1);
        let m = Array2::ones((16, 16));
        assert_eq!(step_reward(&x, &x, &b, &m, 0, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[1.0], &[0.0], true, 0.99, 0.95);
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let (a, _) = gae(&[0.0, 1.0], &[0.0, 0.0], true, 1.0, 1.0);
        assert_eq!(a, vec![1.0, 1.0]);
        let (rw, v) = ([0.3, -0.2, 0.5], [0.1, 0.4, -0.3]);
        let (a, r) = gae(&rw, &v, true, 0.9, 0.0);
        let want = [0.3 + 0.9 * 0.4 - 0.1, -0.2 + 0.9 * -0.3 - 0.4, 0.5 - -0.3];
        for k in 0..3 {
            assert_relative_eq!(a[k], want[k], epsilon = 1e-15);
            assert_relative_eq!(r[k], a[k] + v[k], epsilon = 1e-15);
        }
        // Monte-Carlo return minus baseline.
        let (a, _) = gae(&rw, &v, true, 1.0, 1.0);
        assert_relative_eq!(a[0], 0.6 - 0.1, epsilon = 1e-15);
        let mut one = vec![3.0];
        normalize_advantages(&mut one);
        assert_eq!(one, vec![3.0]);
    }

    #[test]
    fn surrogate_examples() {
        let (l, _) = clipped_surrogate(1.0, 0.7, 0.2);
        assert_eq!(l, -0.7);
        // A > 0 beyond the clip: flat in ρ.
        let eps = 0.2;
        let rho = 1.0 + 2.0 * eps;
        let h = 1e-6;
        let fd = (clipped_surrogate(rho + h, 1.0, eps).0 - clipped_surrogate(rho - h, 1.0, eps).0) / (2.0 * h);
        assert_eq!(fd, 0.0);
        assert_eq!(clipped_surrogate(rho, 1.0, eps).1, 0.0);
        // A < 0 below the clip is flat too; inside the band the slope is −A.
        assert_eq!(clipped_surrogate(0.5, -1.0, eps).1, 0.0);
        assert_eq!(clipped_surrogate(1.1, -1.0, eps).1, 1.0);
    }

    fn tiny_controller() -> Controller {
        Controller::new(&ControllerConfig {
            feature_width: 3,
            b_max: 4,
            m_max: 2,
            seed: 7,
            ..Default::default()
        })
        .unwrap()
    }

    fn random_samples(ctl: &Controller, n: usize, seed: u64) -> Vec<PpoSample> {
        let mut rng = seeded_rng(seed);
        let grid = TileGrid::new(8, 8, 4).unwrap();
        (0..n)
            .map(|_| {
                let mut f = || Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
                let (a, b, c, u) = (f(), f(), f(), f());
                let feats =
                    crate::controller::extract_state_features(&a, &b, &c, &u, &Array2::ones((8, 8)), 1, 4).unwrap();
                let (dist, _) = ctl.policy_forward(&feats, &grid).unwrap();
                let s = sample_action(&dist, &mut rng, DecodeMode::Sample);
                PpoSample {
                    features: feats,
                    action: s.action,
                    old_log_prob: s.log_prob,
                    advantage: rng.random_range(-1.0..1.0),
                    ret: rng.random_range(-1.0..1.0),
                }
            })
            .collect()
    }

    #[test]
    fn ratio_is_one_at_identical_parameters() {
        let ctl = tiny_controller();
        let samples = random_samples(&ctl, 6, 1);
        let batch: Vec<&PpoSample> = samples.iter().collect();
        let cfg = PpoConfig::default();
        let (loss, _) = ppo_loss_and_grads(&ctl, &batch, 4, &cfg).unwrap();
        assert_eq!(loss.max_log_ratio, 0.0);
        let mean_adv = samples.iter().map(|s| s.advantage).sum::<f64>() / 6.0;
        assert_relative_eq!(loss.policy, -mean_adv, epsilon = 1e-14);
        let bare = PpoConfig {
            entropy_coef: 0.0,
            value_coef: 0.0,
            ..cfg
        };
        let (loss, _) = ppo_loss_and_grads(&ctl, &batch, 4, &bare).unwrap();
        assert_eq!(loss.total, loss.policy);
    }

    fn total_loss(ctl: &Controller, samples: &[PpoSample], cfg: &PpoConfig) -> f64 {
        let batch: Vec<&PpoSample> = samples.iter().collect();
        ppo_loss_and_grads(ctl, &batch, 4, cfg).unwrap().0.total
    }

    fn check_grads_fd(cfg: &PpoConfig, samples: &[PpoSample], ctl: &mut Controller) {
        let batch: Vec<&PpoSample> = samples.iter().collect();
        let (_, grads) = ppo_loss_and_grads(ctl, &batch, 4, cfg).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for pi in 0..ctl.params().len() {
            let len = ctl.params().iter().nth(pi).unwrap().value.len();
            for j in [0, len / 2, len - 1] {
                let orig = param_at(ctl.params(), pi, j);
                set_param(ctl.params_mut(), pi, j, orig + h);
                let lp = total_loss(ctl, samples, cfg);
                set_param(ctl.params_mut(), pi, j, orig - h);
                let lm = total_loss(ctl, samples, cfg);
                set_param(ctl.params_mut(), pi, j, orig);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.by_index(pi).data()[j];
                let scale = fd.abs().max(an.abs());
                if scale > 1e-7 {
                    assert!((fd - an).abs() / scale < 1e-3, "param {pi}[{j}]: fd {fd} analytic {an}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10);
    }

    fn param_at(p: &ParamStore, i: usize, j: usize) -> f64 {
        p.iter().nth(i).unwrap().value.data()[j]
    }

    fn set_param(p: &mut ParamStore, i: usize, j: usize, v: f64) {
        p.iter_mut().nth(i).unwrap().value.data_mut()[j] = v;
    }

    #[test]
    fn value_loss_gradient_matches_finite_differences() {
        let mut ctl = tiny_controller();
        let samples = random_samples(&ctl, 4, 2);
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            value_coef: 1.0,
            clip_epsilon: 1e9,
            ..Default::default()
        };
        // Zero advantages isolate the value term.
        let samples: Vec<PpoSample> = samples
            .into_iter()
            .map(|s| PpoSample { advantage: 0.0, ..s })
            .collect();
        check_grads_fd(&cfg, &samples, &mut ctl);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut ctl = tiny_controller();
        let samples = random_samples(&ctl, 4, 3);
        // A huge clip range keeps the surrogate smooth for the difference quotient.
        let cfg = PpoConfig {
            clip_epsilon: 1e9,
            entropy_coef: 0.05,
            ..Default::default()
        };
        check_grads_fd(&cfg, &samples, &mut ctl);
    }

    #[test]
    fn rewards_telescope_with_zero_cost() {
        use crate::cmf::NetShape;
        use crate::synth::{generate_pair, DegradationTemplate, PhantomSpec};
        let net = FlowNet::new(&NetShape { base_width: 8, depth: 2, embed_dim: 8 }, 1).unwrap();
        let pair = generate_pair(3, &PhantomSpec::default(), &DegradationTemplate::default()).unwrap();
        let ctl = Controller::new(&ControllerConfig { feature_width: 4, ..Default::default() }).unwrap();
        let cfg = RewardConfig { alpha: 0.0, ..Default::default() };
        let rollout = RolloutConfig::default();
        let ep = collect_episode(&net, &ctl, &pair, &rollout, &cfg, 4, 5).unwrap();
        let body = pair.body_mask.mapv(f64::from);
        let mut policy = LearnedPolicy::new(&ctl, seeded_rng(4), DecodeMode::Sample);
        let res = enhance(&net, Some(&mut policy), &pair.source_f64(), &body, &rollout, 5).unwrap();
        let q0 = quality_score(&res.states[0], &pair.target_f64(), &body, &cfg).unwrap();
        let q1 = quality_score(&res.output, &pair.target_f64(), &body, &cfg).unwrap();
        assert_relative_eq!(ep.trajectory.total_reward(), q1 - q0, epsilon = 1e-12);
        assert!(ep.micro_steps > 0);
    }

    #[test]
    fn training_keeps_backbone_and_is_reproducible() {
        use crate::cmf::NetShape;
        use crate::synth::{generate_pair, DegradationTemplate, PhantomSpec};
        let net = FlowNet::new(&NetShape { base_width: 8, depth: 2, embed_dim: 8 }, 1).unwrap();
        let pairs: Vec<ImagePair> = (0..2)
            .map(|i| generate_pair(i, &PhantomSpec::default(), &DegradationTemplate::default()).unwrap())
            .collect();
        let ctl = ControllerConfig { feature_width: 4, ..Default::default() };
        let ppo = PpoConfig { n_episodes: 4, episodes_per_batch: 2, epochs_per_batch: 2, minibatch_size: 4, ..Default::default() };
        let run = || {
            train_controller(&net, &pairs, &RolloutConfig::default(), &ctl, &ppo, &RewardConfig::default(), |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.controller.params().checksum(), b.controller.params().checksum());
        assert!(matches!(
            train_controller(&net, &[], &RolloutConfig::default(), &ctl, &ppo, &RewardConfig::default(), |_| {}),
            Err(Error::Precondition(_))
        ));
    }
}
