//! Progressive enhancement: coarse MeanFlow steps over a uniform schedule,
//! optional tile-gated micro-steps, and early termination.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmf::{FlowModel, TimePair};
use crate::error::{ensure_same_shape, Error, Result};
use crate::nn::seeded_rng;

/// Descending times `t_0 = 1 > ... > t_K = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `(t_k, t_{k+1})`.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        (self.times[k], self.times[k + 1])
    }
}

/// Uniform schedule `t_k = 1 - k/K`.
pub fn make_schedule(k_steps: usize) -> Result<Schedule> {
    if k_steps < 1 {
        return Err(Error::Precondition(format!("K must be >= 1, got {k_steps}")));
    }
    let mut times: Vec<f64> = (0..=k_steps).map(|k| 1.0 - k as f64 / k_steps as f64).collect();
    times[k_steps] = 0.0;
    Ok(Schedule { times })
}

/// Regular partition of an image into square tiles; the last row and column
/// may be partial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub height: usize,
    pub width: usize,
}

impl TileGrid {
    pub fn new(height: usize, width: usize, tile_size: usize) -> Result<Self> {
        if tile_size < 2 {
            return Err(Error::spec("tile_size", format!("must be >= 2, got {tile_size}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Dimension("image has zero extent".into()));
        }
        Ok(Self {
            tile_size,
            n_rows: height.div_ceil(tile_size),
            n_cols: width.div_ceil(tile_size),
            height,
            width,
        })
    }

    pub fn n_tiles(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn tile_of(&self, y: usize, x: usize) -> (usize, usize) {
        (y / self.tile_size, x / self.tile_size)
    }

    /// Pixel ranges `(y0..y1, x0..x1)` of tile `(r, c)`.
    pub fn tile_rect(&self, r: usize, c: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = r * self.tile_size;
        let x0 = c * self.tile_size;
        (
            y0..(y0 + self.tile_size).min(self.height),
            x0..(x0 + self.tile_size).min(self.width),
        )
    }

    /// Nearest-neighbour upsampling of a per-tile map to pixels.
    pub fn upsample(&self, tiles: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| tiles[self.tile_of(y, x)])
    }

    /// Per-tile mean of a pixel map.
    pub fn tile_means(&self, img: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(self.dims(), |(r, c)| {
            let (ys, xs) = self.tile_rect(r, c);
            let n = (ys.len() * xs.len()) as f64;
            let mut s = 0.0;
            for y in ys {
                for x in xs.clone() {
                    s += img[[y, x]];
                }
            }
            s / n
        })
    }
}

/// Controller decision for one rollout step.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementAction {
    /// Gates in `[0, 1]` per tile (binary during training).
    pub tile_select: Array2<f64>,
    /// Requested micro-steps per tile in `[0, m_max]`.
    pub tile_budget: Array2<usize>,
    /// Cap on total tile-steps across the image.
    pub global_budget: usize,
    pub stop: bool,
    /// Ranking key used when the global budget binds (higher first, then row-major).
    pub tile_priority: Array2<f64>,
}

impl RefinementAction {
    /// No refinement and no stop.
    pub fn empty(grid: &TileGrid) -> Self {
        Self {
            tile_select: Array2::zeros(grid.dims()),
            tile_budget: Array2::zeros(grid.dims()),
            global_budget: 0,
            stop: false,
            tile_priority: Array2::zeros(grid.dims()),
        }
    }

    pub fn validate(&self, grid: &TileGrid, m_max: usize) -> Result<()> {
        for (name, dim) in [
            ("tile_select", self.tile_select.dim()),
            ("tile_budget", self.tile_budget.dim()),
            ("tile_priority", self.tile_priority.dim()),
        ] {
            if dim != grid.dims() {
                return Err(Error::Dimension(format!(
                    "{name} is {dim:?} but the tile grid is {:?}",
                    grid.dims()
                )));
            }
        }
        if self.tile_select.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Precondition("tile_select gates must lie in [0, 1]".into()));
        }
        if let Some(b) = self.tile_budget.iter().find(|&&b| b > m_max) {
            return Err(Error::Precondition(format!("tile budget {b} exceeds m_max {m_max}")));
        }
        if self
            .tile_select
            .iter()
            .zip(&self.tile_budget)
            .any(|(&g, &b)| g == 0.0 && b > 0)
        {
            return Err(Error::Precondition("budget assigned to an unselected tile".into()));
        }
        Ok(())
    }
}

/// Micro-step levels actually granted per tile: level `m` goes to tiles whose
/// request reaches `m`, ranked by priority then row-major order, until the
/// global budget of tile-steps is spent.
pub fn allocate_budget(action: &RefinementAction, m_max: usize) -> Array2<usize> {
    let dims = action.tile_budget.dim();
    let mut order: Vec<(usize, usize)> = (0..dims.0).flat_map(|r| (0..dims.1).map(move |c| (r, c))).collect();
    order.sort_by(|a, b| {
        action.tile_priority[*b]
            .partial_cmp(&action.tile_priority[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut granted = Array2::<usize>::zeros(dims);
    let mut spent = 0;
    'levels: for m in 1..=m_max {
        for &rc in &order {
            if action.tile_select[rc] > 0.0 && action.tile_budget[rc] >= m && granted[rc] == m - 1 {
                if spent == action.global_budget {
                    break 'levels;
                }
                granted[rc] = m;
                spent += 1;
            }
        }
    }
    granted
}

/// Pixel masks `M^(1..m_max)`: tile gate where the granted level reaches `m`.
pub fn build_masks(
    tile_select: &Array2<f64>,
    granted: &Array2<usize>,
    grid: &TileGrid,
    m_max: usize,
    feather: bool,
) -> Result<Vec<Array2<f64>>> {
    if tile_select.dim() != grid.dims() || granted.dim() != grid.dims() {
        return Err(Error::Dimension("action does not match the tile grid".into()));
    }
    if let Some(b) = granted.iter().find(|&&b| b > m_max) {
        return Err(Error::Precondition(format!("tile budget {b} exceeds m_max {m_max}")));
    }
    (1..=m_max)
        .map(|m| {
            let gates = Array2::from_shape_fn(grid.dims(), |rc| {
                if granted[rc] >= m {
                    tile_select[rc]
                } else {
                    0.0
                }
            });
            let mask = grid.upsample(&gates);
            Ok(if feather { feather_mask(&mask) } else { mask })
        })
        .collect()
}

/// Softens gate edges over one pixel: a pixel whose 4-neighbourhood contains a
/// lower gate takes the midpoint of the cosine ramp between the two levels.
/// Pixels are never raised, so fully gated pixels stay untouched.
pub fn feather_mask(mask: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let g = mask[[y, x]];
        let mut lo = g;
        if y > 0 {
            lo = lo.min(mask[[y - 1, x]]);
        }
        if y + 1 < h {
            lo = lo.min(mask[[y + 1, x]]);
        }
        if x > 0 {
            lo = lo.min(mask[[y, x - 1]]);
        }
        if x + 1 < w {
            lo = lo.min(mask[[y, x + 1]]);
        }
        if lo < g {
            0.5 * (g + lo)
        } else {
            g
        }
    })
}

/// `x_coarse = x_k - (t_k - t_{k+1}) u(x_k, x_A, t_{k+1}, t_k)`; also returns `u`.
pub fn coarse_step(
    net: &impl FlowModel,
    x_k: &Array2<f64>,
    x_a: &Array2<f64>,
    t_k: f64,
    t_next: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if t_next > t_k {
        return Err(Error::Precondition(format!(
            "coarse step needs t_next <= t_k, got {t_next} > {t_k}"
        )));
    }
    let u = net.flow(x_k, x_a, TimePair::new(t_next, t_k)?)?;
    let dt = t_k - t_next;
    let mut x = x_k.clone();
    x.zip_mut_with(&u, |v, &d| *v -= dt * d);
    Ok((x, u))
}

/// `x_next = M (x - Δt u) + (1 - M) x` with `Δt = γ (t_k - t_{k+1})`.
/// Pixels with `M = 0` are copied unchanged.
pub fn micro_step(
    net: &impl FlowModel,
    x_prev: &Array2<f64>,
    x_a: &Array2<f64>,
    t_k: f64,
    t_next: f64,
    mask: &Array2<f64>,
    gamma_local: f64,
) -> Result<Array2<f64>> {
    ensure_same_shape("mask vs state", mask.shape(), x_prev.shape())?;
    if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::Precondition("mask values must lie in [0, 1]".into()));
    }
    let u = net.flow(x_prev, x_a, TimePair::new(t_next, t_k)?)?;
    let dt = gamma_local * (t_k - t_next);
    let mut out = x_prev.clone();
    for ((o, &m), &d) in out.iter_mut().zip(mask).zip(&u) {
        if m != 0.0 {
            *o = m * (*o - dt * d) + (1.0 - m) * *o;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    #[serde(rename = "K")]
    pub k_steps: usize,
    pub tile_size: usize,
    pub m_max: usize,
    pub gamma_local: f64,
    pub feather: bool,
    pub init_seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            k_steps: 4,
            tile_size: 4,
            m_max: 3,
            gamma_local: 0.25,
            feather: false,
            init_seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_steps < 1 {
            return Err(Error::spec("K", "must be >= 1"));
        }
        if self.tile_size < 2 {
            return Err(Error::spec("tile_size", "must be >= 2"));
        }
        if self.m_max < 1 {
            return Err(Error::spec("m_max", "must be >= 1"));
        }
        if !(self.gamma_local > 0.0 && self.gamma_local <= 1.0) {
            return Err(Error::spec("gamma_local", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// What a controller sees after the coarse update of step `k`.
pub struct Observation<'a> {
    pub x_a: &'a Array2<f64>,
    /// State before the coarse update.
    pub x_k: &'a Array2<f64>,
    pub x_coarse: &'a Array2<f64>,
    /// Flow field used by the coarse update.
    pub u: &'a Array2<f64>,
    pub body_mask: &'a Array2<f64>,
    pub k: usize,
    pub k_steps: usize,
    pub grid: &'a TileGrid,
    pub m_max: usize,
}

/// Anything that turns an observation into a refinement action.
pub trait Policy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<RefinementAction>;
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn act(&mut self, obs: &Observation<'_>) -> Result<RefinementAction> {
        (**self).act(obs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub k: usize,
    pub t_k: f64,
    pub t_next: f64,
    pub stop: bool,
    pub global_budget: usize,
    /// Row-major gates.
    pub tile_select: Vec<f64>,
    /// Row-major requested budgets.
    pub tile_budget: Vec<usize>,
    /// Row-major granted micro-step levels.
    pub granted_budget: Vec<usize>,
    /// Masked micro-step passes run (one network evaluation each).
    pub executed_micro_steps: usize,
    /// Sum of granted levels over tiles.
    pub tile_steps: usize,
    /// Network evaluations in this step: one coarse plus the micro-steps.
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub version: u32,
    pub k_steps: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub steps: Vec<StepTrace>,
    pub total_eval_count: usize,
    pub total_micro_steps: usize,
}

pub struct RolloutResult {
    pub output: Array2<f64>,
    pub trace: RolloutTrace,
    /// `states[0]` is the initial noise; `states[k + 1]` follows step `k`.
    pub states: Vec<Array2<f64>>,
}

/// Standard-normal initial state for `seed`.
pub fn initial_state(dim: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_fn(dim, |_| rng.sample(StandardNormal))
}

/// Runs the rollout from seeded noise. Without a policy only coarse steps run.
pub fn enhance<P: Policy>(
    net: &impl FlowModel,
    mut policy: Option<P>,
    x_a: &Array2<f64>,
    body_mask: &Array2<f64>,
    config: &RolloutConfig,
    noise_seed: u64,
) -> Result<RolloutResult> {
    config.validate()?;
    ensure_same_shape("body mask vs source", body_mask.shape(), x_a.shape())?;
    let (h, w) = x_a.dim();
    let grid = TileGrid::new(h, w, config.tile_size)?;
    let schedule = make_schedule(config.k_steps)?;
    let mut x = initial_state((h, w), noise_seed);
    let mut states = vec![x.clone()];
    let mut steps = Vec::with_capacity(config.k_steps);
    for k in 0..schedule.steps() {
        let (t_k, t_next) = schedule.interval(k);
        let (x_coarse, u) = coarse_step(net, &x, x_a, t_k, t_next)?;
        let mut rec = StepTrace {
            k,
            t_k,
            t_next,
            stop: false,
            global_budget: 0,
            tile_select: vec![0.0; grid.n_tiles()],
            tile_budget: vec![0; grid.n_tiles()],
            granted_budget: vec![0; grid.n_tiles()],
            executed_micro_steps: 0,
            tile_steps: 0,
            eval_count: 1,
        };
        let mut next = x_coarse;
        if let Some(p) = policy.as_mut() {
            let obs = Observation {
                x_a,
                x_k: &x,
                x_coarse: &next,
                u: &u,
                body_mask,
                k,
                k_steps: config.k_steps,
                grid: &grid,
                m_max: config.m_max,
            };
            let action = p.act(&obs)?;
            action.validate(&grid, config.m_max)?;
            rec.stop = action.stop;
            rec.global_budget = action.global_budget;
            rec.tile_select = action.tile_select.iter().copied().collect();
            rec.tile_budget = action.tile_budget.iter().copied().collect();
            if !action.stop {
                let granted = allocate_budget(&action, config.m_max);
                let masks = build_masks(&action.tile_select, &granted, &grid, config.m_max, config.feather)?;
                let levels = granted.iter().copied().max().unwrap_or(0);
                for mask in masks.iter().take(levels) {
                    next = micro_step(net, &next, x_a, t_k, t_next, mask, config.gamma_local)?;
                }
                rec.granted_budget = granted.iter().copied().collect();
                rec.executed_micro_steps = levels;
                rec.tile_steps = granted.sum();
                rec.eval_count += levels;
            }
        }
        let stop = rec.stop;
        steps.push(rec);
        x = next;
        states.push(x.clone());
        if stop {
            break;
        }
    }
    let trace = RolloutTrace {
        version: 1,
        k_steps: config.k_steps,
        tile_rows: grid.n_rows,
        tile_cols: grid.n_cols,
        total_eval_count: steps.iter().map(|s| s.eval_count).sum(),
        total_micro_steps: steps.iter().map(|s| s.executed_micro_steps).sum(),
        steps,
    };
    Ok(RolloutResult {
        output: x,
        trace,
        states,
    })
}

/// Runs [`enhance`] without a controller.
pub fn enhance_baseline(
    net: &impl FlowModel,
    x_a: &Array2<f64>,
    body_mask: &Array2<f64>,
    config: &RolloutConfig,
    noise_seed: u64,
) -> Result<RolloutResult> {
    enhance::<NoPolicy>(net, None, x_a, body_mask, config, noise_seed)
}

/// Placeholder type for rollouts without a controller.
pub enum NoPolicy {}

impl Policy for NoPolicy {
    fn act(&mut self, _: &Observation<'_>) -> Result<RefinementAction> {
        match *self {}
    }
}
