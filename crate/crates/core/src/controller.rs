//! Actor-critic region controller: state features, convolutional trunk pooled
//! to the tile grid, spatial/global/value heads, and action sampling.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmf::network::{conv, lin, Conv, FlowNet, Lin};
use crate::container::{ArrayData, Container};
use crate::error::{ensure_same_shape, Error, Result};
use crate::nn::{seeded_rng, DualGraph, Graph, NodeId, ParamStore, Tape, Tensor};
use crate::rollout::{Observation, Policy, RefinementAction, TileGrid};

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-6;
pub const N_FEATURES: usize = 7;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub feature_width: usize,
    #[serde(rename = "B_max")]
    pub b_max: usize,
    pub m_max: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            feature_width: 32,
            b_max: 16,
            m_max: 3,
            entropy_coef: 0.01,
            value_coef: 0.5,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_width < 1 {
            return Err(Error::spec("feature_width", "must be >= 1"));
        }
        if self.m_max < 1 {
            return Err(Error::spec("m_max", "must be >= 1"));
        }
        for (name, v) in [("entropy_coef", self.entropy_coef), ("value_coef", self.value_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::spec(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Seven-channel stack: source, current state, difference, flow field, body
/// mask, step fraction, pending-update magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFeatures {
    pub channels: Array3<f64>,
}

impl StateFeatures {
    pub fn dim(&self) -> (usize, usize) {
        let (_, h, w) = self.channels.dim();
        (h, w)
    }
}

pub fn extract_state_features(
    x_a: &Array2<f64>,
    x_k: &Array2<f64>,
    x_coarse: &Array2<f64>,
    u: &Array2<f64>,
    body_mask: &Array2<f64>,
    k: usize,
    k_steps: usize,
) -> Result<StateFeatures> {
    for (what, a) in [("x_k", x_k), ("x_coarse", x_coarse), ("u", u), ("body_mask", body_mask)] {
        ensure_same_shape(what, a.shape(), x_a.shape())?;
    }
    if k >= k_steps {
        return Err(Error::Precondition(format!("step {k} outside 0..{k_steps}")));
    }
    let (h, w) = x_a.dim();
    let mut c = Array3::zeros((N_FEATURES, h, w));
    c.index_axis_mut(Axis(0), 0).assign(x_a);
    c.index_axis_mut(Axis(0), 1).assign(x_k);
    c.index_axis_mut(Axis(0), 2).assign(&(x_k - x_a));
    c.index_axis_mut(Axis(0), 3).assign(u);
    c.index_axis_mut(Axis(0), 4).assign(body_mask);
    c.index_axis_mut(Axis(0), 5).fill(k as f64 / k_steps as f64);
    c.index_axis_mut(Axis(0), 6).assign(&(x_coarse - x_k).mapv(f64::abs));
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("state features are not finite".into()));
    }
    Ok(StateFeatures { channels: c })
}

pub fn features_from_observation(obs: &Observation<'_>) -> Result<StateFeatures> {
    extract_state_features(obs.x_a, obs.x_k, obs.x_coarse, obs.u, obs.body_mask, obs.k, obs.k_steps)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Clamped sigmoid; the flag reports whether the clamp is active.
fn clamped_prob(z: f64) -> (f64, bool) {
    let p = sigmoid(z);
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn bernoulli_entropy(p: f64) -> f64 {
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

fn categorical_entropy(log_p: &[f64]) -> f64 {
    -log_p.iter().map(|l| l.exp() * l).sum::<f64>()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Policy output for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    /// Raw select logits (pre-clamp).
    pub select_logit: Array2<f64>,
    pub tile_select_prob: Array2<f64>,
    /// `[rows, cols, m_max + 1]`.
    pub tile_budget_logits: Array3<f64>,
    /// Over `{0..B_max}`.
    pub global_budget_logits: Vec<f64>,
    pub stop_logit: f64,
    pub stop_prob: f64,
}

impl ActionDistribution {
    /// Builds a distribution from raw head outputs.
    pub fn from_logits(
        select_logit: Array2<f64>,
        tile_budget_logits: Array3<f64>,
        global_budget_logits: Vec<f64>,
        stop_logit: f64,
    ) -> Self {
        Self {
            tile_select_prob: select_logit.mapv(|z| clamped_prob(z).0),
            select_logit,
            tile_budget_logits,
            global_budget_logits,
            stop_prob: clamped_prob(stop_logit).0,
            stop_logit,
        }
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.select_logit.dim()
    }

    pub fn m_max(&self) -> usize {
        self.tile_budget_logits.dim().2 - 1
    }

    pub fn b_max(&self) -> usize {
        self.global_budget_logits.len() - 1
    }

    fn budget_log_probs(&self, r: usize, c: usize) -> Vec<f64> {
        let row: Vec<f64> = (0..=self.m_max()).map(|m| self.tile_budget_logits[[r, c, m]]).collect();
        log_softmax(&row)
    }

    fn check_action(&self, a: &RefinementAction) -> Result<()> {
        let dims = self.grid_dims();
        if a.tile_select.dim() != dims || a.tile_budget.dim() != dims {
            return Err(Error::Dimension(format!(
                "action grid {:?} does not match distribution grid {dims:?}",
                a.tile_select.dim()
            )));
        }
        if a.global_budget > self.b_max() {
            return Err(Error::Dimension(format!(
                "global budget {} outside 0..={}",
                a.global_budget,
                self.b_max()
            )));
        }
        if let Some(b) = a.tile_budget.iter().find(|&&b| b > self.m_max()) {
            return Err(Error::Dimension(format!("tile budget {b} outside 0..={}", self.m_max())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledAction {
    pub action: RefinementAction,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Draws (or decodes) an action. Random draws happen in row-major tile order
/// (select, then budget when selected), then global budget, then stop.
pub fn sample_action(dist: &ActionDistribution, rng: &mut impl Rng, mode: DecodeMode) -> SampledAction {
    let (rows, cols) = dist.grid_dims();
    let mut select = Array2::zeros((rows, cols));
    let mut budget = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let p = dist.tile_select_prob[[r, c]];
            let on = match mode {
                DecodeMode::Sample => rng.random::<f64>() < p,
                DecodeMode::Greedy => p > 0.5,
            };
            if on {
                select[[r, c]] = 1.0;
                let lp = dist.budget_log_probs(r, c);
                budget[[r, c]] = match mode {
                    DecodeMode::Sample => sample_categorical(&lp, rng),
                    DecodeMode::Greedy => argmax(&lp),
                };
            }
        }
    }
    let glp = log_softmax(&dist.global_budget_logits);
    let global_budget = match mode {
        DecodeMode::Sample => sample_categorical(&glp, rng),
        DecodeMode::Greedy => argmax(&glp),
    };
    let stop = match mode {
        DecodeMode::Sample => rng.random::<f64>() < dist.stop_prob,
        DecodeMode::Greedy => dist.stop_prob > 0.5,
    };
    let action = RefinementAction {
        tile_select: select,
        tile_budget: budget,
        global_budget,
        stop,
        tile_priority: dist.tile_select_prob.clone(),
    };
    let (log_prob, entropy) = log_prob_and_entropy(dist, &action);
    SampledAction {
        action,
        log_prob,
        entropy,
    }
}

fn sample_categorical(log_p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in log_p.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    log_p.len() - 1
}

/// Log-probability and entropy of the realized action. Budget terms only
/// count on selected tiles.
pub(crate) fn log_prob_and_entropy(dist: &ActionDistribution, a: &RefinementAction) -> (f64, f64) {
    let (rows, cols) = dist.grid_dims();
    let mut lp = 0.0;
    let mut ent = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let p = dist.tile_select_prob[[r, c]];
            ent += bernoulli_entropy(p);
            if a.tile_select[[r, c]] > 0.0 {
                lp += p.ln();
                let blp = dist.budget_log_probs(r, c);
                lp += blp[a.tile_budget[[r, c]]];
                ent += categorical_entropy(&blp);
            } else {
                lp += (1.0 - p).ln();
            }
        }
    }
    let glp = log_softmax(&dist.global_budget_logits);
    lp += glp[a.global_budget];
    ent += categorical_entropy(&glp);
    lp += if a.stop { dist.stop_prob.ln() } else { (1.0 - dist.stop_prob).ln() };
    ent += bernoulli_entropy(dist.stop_prob);
    (lp, ent)
}

pub fn action_log_prob(dist: &ActionDistribution, action: &RefinementAction) -> Result<f64> {
    dist.check_action(action)?;
    Ok(log_prob_and_entropy(dist, action).0)
}

/// Gradients of the action log-probability and of the entropy with respect
/// to the raw head outputs, laid out like the head tensors.
pub(crate) struct HeadGrads {
    /// `[2 + m_max, rows, cols]`: select logit then budget logits.
    pub spatial: Vec<f64>,
    /// `[B_max + 2]`: global budget logits then stop logit.
    pub global: Vec<f64>,
}

fn bernoulli_grads(z: f64, on: bool) -> (f64, f64) {
    let (p, clamped) = clamped_prob(z);
    if clamped {
        return (0.0, 0.0);
    }
    let dlp = if on { 1.0 - p } else { -p };
    // dH/dz = log((1 - p) / p) · p(1 - p) = -z · p(1 - p)
    let dh = -z * p * (1.0 - p);
    (dlp, dh)
}

pub(crate) fn head_grads(dist: &ActionDistribution, a: &RefinementAction) -> (HeadGrads, HeadGrads) {
    let (rows, cols) = dist.grid_dims();
    let m1 = dist.m_max() + 1;
    let plane = rows * cols;
    let mut g_lp = HeadGrads {
        spatial: vec![0.0; (1 + m1) * plane],
        global: vec![0.0; dist.b_max() + 2],
    };
    let mut g_h = HeadGrads {
        spatial: vec![0.0; (1 + m1) * plane],
        global: vec![0.0; dist.b_max() + 2],
    };
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let on = a.tile_select[[r, c]] > 0.0;
            let (dlp, dh) = bernoulli_grads(dist.select_logit[[r, c]], on);
            g_lp.spatial[idx] = dlp;
            g_h.spatial[idx] = dh;
            if on {
                let blp = dist.budget_log_probs(r, c);
                let h = categorical_entropy(&blp);
                let chosen = a.tile_budget[[r, c]];
                for (m, l) in blp.iter().enumerate() {
                    let pi = l.exp();
                    let at = (1 + m) * plane + idx;
                    g_lp.spatial[at] = if m == chosen { 1.0 } else { 0.0 } - pi;
                    g_h.spatial[at] = -pi * (l + h);
                }
            }
        }
    }
    let glp = log_softmax(&dist.global_budget_logits);
    let h = categorical_entropy(&glp);
    for (i, l) in glp.iter().enumerate() {
        let pi = l.exp();
        g_lp.global[i] = if i == a.global_budget { 1.0 } else { 0.0 } - pi;
        g_h.global[i] = -pi * (l + h);
    }
    let (dlp, dh) = bernoulli_grads(dist.stop_logit, a.stop);
    let last = dist.b_max() + 1;
    g_lp.global[last] = dlp;
    g_h.global[last] = dh;
    (g_lp, g_h)
}

/// Graph handles of the three heads for a batch.
pub(crate) struct Heads<V> {
    /// `[N, 2 + m_max, rows, cols]`
    pub spatial: V,
    /// `[N, B_max + 2]`
    pub global: V,
    /// `[N, 1]`
    pub value: V,
}

pub struct Controller {
    config: ControllerConfig,
    params: ParamStore,
    trunk: [Conv; 3],
    spatial: Conv,
    global1: Lin,
    global2: Lin,
    value1: Lin,
    value2: Lin,
}

impl Controller {
    pub fn new(config: &ControllerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let mut p = ParamStore::new();
        let w = config.feature_width;
        let trunk = [
            conv(&mut p, &mut rng, "trunk.0", N_FEATURES, w, 3, 1.0),
            conv(&mut p, &mut rng, "trunk.1", w, w, 3, 1.0),
            conv(&mut p, &mut rng, "trunk.2", w, w, 3, 1.0),
        ];
        let spatial = conv(&mut p, &mut rng, "spatial", w, 2 + config.m_max, 1, 0.1);
        let global1 = lin(&mut p, &mut rng, "global.fc1", w, w, 1.0);
        let global2 = lin(&mut p, &mut rng, "global.fc2", w, config.b_max + 2, 0.1);
        let value1 = lin(&mut p, &mut rng, "value.fc1", w, w, 1.0);
        let value2 = lin(&mut p, &mut rng, "value.fc2", w, 1, 0.1);
        Ok(Self {
            config: config.clone(),
            params: p,
            trunk,
            spatial,
            global1,
            global2,
            value1,
            value2,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn forward_graph<G: Graph>(&self, g: &mut G, feats: &G::Var, tile_size: usize) -> Heads<G::Var> {
        let h = FlowNet::conv_fwd(g, &self.trunk[0], feats);
        let h = g.silu(&h);
        let h = FlowNet::conv_fwd(g, &self.trunk[1], &h);
        let h = g.silu(&h);
        let h = g.avg_pool(&h, tile_size);
        let h = FlowNet::conv_fwd(g, &self.trunk[2], &h);
        let h = g.silu(&h);
        let spatial = FlowNet::conv_fwd(g, &self.spatial, &h);
        let pooled = g.mean_hw(&h);
        let gl = FlowNet::lin_fwd(g, &self.global1, &pooled);
        let gl = g.silu(&gl);
        let global = FlowNet::lin_fwd(g, &self.global2, &gl);
        let v = FlowNet::lin_fwd(g, &self.value1, &pooled);
        let v = g.silu(&v);
        let value = FlowNet::lin_fwd(g, &self.value2, &v);
        Heads { spatial, global, value }
    }

    pub(crate) fn pack_features(feats: &[&StateFeatures]) -> Tensor {
        let (h, w) = feats[0].dim();
        let mut data = Vec::with_capacity(feats.len() * N_FEATURES * h * w);
        for f in feats {
            data.extend(f.channels.iter());
        }
        Tensor::from_vec(&[feats.len(), N_FEATURES, h, w], data)
    }

    /// Decodes head tensors for batch item `n`.
    pub(crate) fn decode(&self, spatial: &Tensor, global: &Tensor, value: &Tensor, n: usize) -> Result<(ActionDistribution, f64)> {
        let (_, ch, rows, cols) = spatial.dims4();
        let plane = rows * cols;
        let s = &spatial.data()[n * ch * plane..(n + 1) * ch * plane];
        let gw = self.config.b_max + 2;
        let gd = &global.data()[n * gw..(n + 1) * gw];
        let v = value.data()[n];
        if s.iter().chain(gd).any(|x| !x.is_finite()) || !v.is_finite() {
            return Err(Error::Numerical("controller heads produced non-finite values".into()));
        }
        let select_logit = Array2::from_shape_vec((rows, cols), s[..plane].to_vec()).expect("plane size");
        let m1 = self.config.m_max + 1;
        let budget = Array3::from_shape_fn((rows, cols, m1), |(r, c, m)| s[(1 + m) * plane + r * cols + c]);
        let dist = ActionDistribution::from_logits(select_logit, budget, gd[..gw - 1].to_vec(), gd[gw - 1]);
        Ok((dist, v))
    }

    /// Action distribution and value estimate for one state.
    pub fn policy_forward(&self, feats: &StateFeatures, grid: &TileGrid) -> Result<(ActionDistribution, f64)> {
        let (dist, value) = self.policy_forward_batch(&[feats], grid)?.remove(0);
        Ok((dist, value))
    }

    pub fn policy_forward_batch(&self, feats: &[&StateFeatures], grid: &TileGrid) -> Result<Vec<(ActionDistribution, f64)>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        for f in feats {
            if f.dim() != (grid.height, grid.width) {
                return Err(Error::Dimension(format!(
                    "features {:?} do not match the tile grid image {:?}",
                    f.dim(),
                    (grid.height, grid.width)
                )));
            }
        }
        let mut g = DualGraph::new(&self.params);
        let x = g.input(Self::pack_features(feats), None);
        let heads = self.forward_graph(&mut g, &x, grid.tile_size);
        let (s, gl, v) = (g.value(&heads.spatial), g.value(&heads.global), g.value(&heads.value));
        (0..feats.len()).map(|n| self.decode(s, gl, v, n)).collect()
    }

    pub(crate) fn forward_tape<'p>(&'p self, tape: &mut Tape<'p>, feats: &[&StateFeatures], tile_size: usize) -> Heads<NodeId> {
        let x = tape.input(Self::pack_features(feats));
        self.forward_graph(tape, &x, tile_size)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::with_meta(serde_json::json!({
            "kind": "controller",
            "version": CHECKPOINT_VERSION,
            "config": self.config,
        }));
        for p in self.params.iter() {
            c.push(&p.name, p.value.shape(), ArrayData::F64(p.value.data().to_vec()));
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        Self::from_container(&Container::read(path)?, &origin)
    }

    pub fn from_container(c: &Container, origin: &str) -> Result<Self> {
        let meta = c
            .meta
            .as_ref()
            .ok_or_else(|| Error::format(origin, "missing metadata"))?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("controller") {
            return Err(Error::format(origin, "not a controller checkpoint"));
        }
        let version = meta.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version:?}")));
        }
        let config: ControllerConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(origin, format!("bad config block: {e}")))?;
        let mut ctl = Self::new(&config)?;
        let named: Vec<(String, Tensor)> = c
            .arrays
            .iter()
            .map(|a| match &a.data {
                ArrayData::F64(v) => Ok((a.name.clone(), Tensor::from_vec(&a.shape, v.clone()))),
                _ => Err(Error::format(origin, format!("parameter `{}` must be f64", a.name))),
            })
            .collect::<Result<_>>()?;
        ctl.params
            .load_named(&named)
            .map_err(|reason| Error::format(origin, reason))?;
        Ok(ctl)
    }
}

/// One decision of a [`LearnedPolicy`], kept for policy-gradient updates.
#[derive(Clone, Debug)]
pub struct DecisionRecord {
    pub features: StateFeatures,
    pub action: RefinementAction,
    pub log_prob: f64,
    pub entropy: f64,
    pub value: f64,
}

/// Drives a rollout with a controller and records every decision.
pub struct LearnedPolicy<'c, R: Rng> {
    pub controller: &'c Controller,
    pub rng: R,
    pub mode: DecodeMode,
    pub record: Vec<DecisionRecord>,
}

impl<'c, R: Rng> LearnedPolicy<'c, R> {
    pub fn new(controller: &'c Controller, rng: R, mode: DecodeMode) -> Self {
        Self {
            controller,
            rng,
            mode,
            record: Vec::new(),
        }
    }
}

impl<R: Rng> Policy for LearnedPolicy<'_, R> {
    fn act(&mut self, obs: &Observation<'_>) -> Result<RefinementAction> {
        if obs.m_max != self.controller.config.m_max {
            return Err(Error::Contract(format!(
                "controller m_max {} differs from rollout m_max {}",
                self.controller.config.m_max, obs.m_max
            )));
        }
        let features = features_from_observation(obs)?;
        let (dist, value) = self.controller.policy_forward(&features, obs.grid)?;
        let s = sample_action(&dist, &mut self.rng, self.mode);
        self.record.push(DecisionRecord {
            features,
            action: s.action.clone(),
            log_prob: s.log_prob,
            entropy: s.entropy,
            value,
        });
        Ok(s.action)
    }
}

/// Every tile selected with the same budget, global budget at `b_max`.
pub struct UniformPolicy {
    pub level: usize,
    pub b_max: usize,
}

impl Policy for UniformPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<RefinementAction> {
        let dims = obs.grid.dims();
        Ok(RefinementAction {
            tile_select: Array2::ones(dims),
            tile_budget: Array2::from_elem(dims, self.level.min(obs.m_max)),
            global_budget: self.b_max,
            stop: false,
            tile_priority: Array2::from_elem(dims, 0.5),
        })
    }
}

/// Uniformly random selections, budgets and global budget; never stops.
pub struct RandomPolicy<R: Rng> {
    pub rng: R,
    pub b_max: usize,
}

impl<R: Rng> Policy for RandomPolicy<R> {
    fn act(&mut self, obs: &Observation<'_>) -> Result<RefinementAction> {
        let dims = obs.grid.dims();
        let mut a = RefinementAction::empty(obs.grid);
        for rc in (0..dims.0).flat_map(|r| (0..dims.1).map(move |c| (r, c))) {
            if self.rng.random::<bool>() {
                a.tile_select[rc] = 1.0;
                a.tile_budget[rc] = self.rng.random_range(0..=obs.m_max);
            }
        }
        a.global_budget = self.rng.random_range(0..=self.b_max);
        a.tile_priority.fill(0.5);
        Ok(a)
    }
}

/// Selects nothing and never stops.
pub struct ZeroBudgetPolicy;

impl Policy for ZeroBudgetPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<RefinementAction> {
        Ok(RefinementAction::empty(obs.grid))
    }
}
