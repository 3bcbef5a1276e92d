use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Adam, Grads, Tape, Tensor};
use crate::synth::{mix_seed, ImagePair};

use super::{
    make_intermediate, sample_time_pair, velocity, BackboneConfig, FlowNet, TimePair,
};

/// Fixed times at which the held-out image loss is evaluated.
pub const HELDOUT_TIMES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_base: f64,
    pub l_mf: f64,
    pub l_img: f64,
    /// Held-out image loss; present only on evaluation steps.
    pub val_l_img: Option<f64>,
}

pub struct TrainOutcome {
    pub net: FlowNet,
    pub history: Vec<LossRecord>,
    pub initial_val_l_img: f64,
    pub final_val_l_img: f64,
}

fn standard_normal(rng: &mut impl Rng, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(dim, |_| rng.sample(StandardNormal))
}

/// Mean one-step image loss over `pairs` and [`HELDOUT_TIMES`], with noise
/// drawn from a stream fixed by `seed`, so values are comparable across steps.
pub fn heldout_image_loss(net: &FlowNet, pairs: &[ImagePair], seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("held-out set is empty".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let x_b = pair.target_f64();
        let x_a = pair.source_f64();
        let mut rng = seeded_rng(mix_seed(seed, i as u64));
        let e = standard_normal(&mut rng, x_b.dim());
        let xts: Vec<Array2<f64>> = HELDOUT_TIMES
            .iter()
            .map(|&t| make_intermediate(&x_b, &e, t))
            .collect::<Result<_>>()?;
        let tps: Vec<TimePair> = HELDOUT_TIMES.iter().map(|&t| TimePair { r: 0.0, t }).collect();
        let refs: Vec<&Array2<f64>> = xts.iter().collect();
        let srcs = vec![&x_a; xts.len()];
        let us = net.flow_batch(&refs, &srcs, &tps)?;
        for ((x_t, u), &t) in xts.iter().zip(&us).zip(&HELDOUT_TIMES) {
            let mut err = 0.0;
            for ((xv, uv), bv) in x_t.iter().zip(u).zip(&x_b) {
                err += (xv - t * uv - bv).abs();
            }
            total += err;
            count += x_b.len();
        }
    }
    Ok(total / count as f64)
}

struct Batch {
    x_a: Vec<Array2<f64>>,
    x_b: Vec<Array2<f64>>,
    x_t: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    tp: Vec<TimePair>,
}

fn draw_batch(pairs: &[ImagePair], config: &BackboneConfig, rng: &mut impl Rng) -> Result<Batch> {
    let mut b = Batch {
        x_a: Vec::new(),
        x_b: Vec::new(),
        x_t: Vec::new(),
        v: Vec::new(),
        tp: Vec::new(),
    };
    for _ in 0..config.batch_size {
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let x_b = pair.target_f64();
        let e = standard_normal(rng, x_b.dim());
        let tp = sample_time_pair(rng, config.r_equals_t_prob);
        b.x_t.push(make_intermediate(&x_b, &e, tp.t)?);
        b.v.push(velocity(&x_b, &e)?);
        b.x_a.push(pair.source_f64());
        b.x_b.push(x_b);
        b.tp.push(tp);
    }
    Ok(b)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss values and parameter gradients of `L_base` averaged over the batch.
fn batch_step(net: &FlowNet, b: &Batch, lambda1: f64) -> Result<(f64, f64, Grads)> {
    let n = b.x_t.len();
    let (h, w) = b.x_t[0].dim();
    let hw = h * w;

    // MeanFlow targets; only interval samples need the JVP.
    let mut u_star: Vec<Array2<f64>> = b.v.clone();
    let interval: Vec<usize> = (0..n).filter(|&i| b.tp[i].r < b.tp[i].t).collect();
    if !interval.is_empty() {
        let xs: Vec<&Array2<f64>> = interval.iter().map(|&i| &b.x_t[i]).collect();
        let srcs: Vec<&Array2<f64>> = interval.iter().map(|&i| &b.x_a[i]).collect();
        let vs: Vec<&Array2<f64>> = interval.iter().map(|&i| &b.v[i]).collect();
        let tps: Vec<TimePair> = interval.iter().map(|&i| b.tp[i]).collect();
        let (_, dus) = net.flow_jvp_batch(&xs, &srcs, &tps, &vs)?;
        for (&i, du) in interval.iter().zip(dus) {
            let span = b.tp[i].t - b.tp[i].r;
            u_star[i].zip_mut_with(&du, |u, &d| *u -= span * d);
        }
    }

    // One taped pass: first half at (r, t), second half at (0, t).
    let xs: Vec<&Array2<f64>> = b.x_t.iter().chain(b.x_t.iter()).collect();
    let srcs: Vec<&Array2<f64>> = b.x_a.iter().chain(b.x_a.iter()).collect();
    let tps: Vec<TimePair> = b
        .tp
        .iter()
        .copied()
        .chain(b.tp.iter().map(|tp| TimePair { r: 0.0, t: tp.t }))
        .collect();
    let mut tape = Tape::new(net.params());
    let out = net.forward_tape(&mut tape, &xs, &srcs, &tps);
    let u = crate::nn::Graph::value(&tape, &out).data().to_vec();

    let denom = (n * hw) as f64;
    let mut seed = vec![0.0; 2 * n * hw];
    let (mut l_mf, mut l_img) = (0.0, 0.0);
    for i in 0..n {
        let pred = &u[i * hw..(i + 1) * hw];
        for (j, (p, s)) in pred.iter().zip(u_star[i].iter()).enumerate() {
            l_mf += (p - s).abs();
            seed[i * hw + j] = sign(p - s) / denom;
        }
        let t = b.tp[i].t;
        let off = (n + i) * hw;
        let u0 = &u[off..off + hw];
        for (j, ((u0v, xt), xb)) in u0.iter().zip(b.x_t[i].iter()).zip(b.x_b[i].iter()).enumerate() {
            let r = xt - t * u0v - xb;
            l_img += r.abs();
            seed[off + j] = -lambda1 * t * sign(r) / denom;
        }
    }
    l_mf /= denom;
    l_img /= denom;
    let mut grads = Grads::zeros_like(net.params());
    tape.backward(vec![(out, Tensor::from_vec(&[2 * n, 1, h, w], seed))], &mut grads);
    Ok((l_mf, l_img, grads))
}

/// Optimizes the flow network on `train` with Adam on `L_base`. `val` (or
/// `train` when empty) supplies the held-out image loss. `on_record` sees every
/// history row as it is produced.
pub fn train_backbone(
    train: &[ImagePair],
    val: &[ImagePair],
    config: &BackboneConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    let mut net = FlowNet::new(&config.net_shape(), config.seed)?;
    let (h, w) = train[0].dim();
    net.check_image_dims(h, w)?;
    if train.iter().chain(val).any(|p| p.dim() != (h, w)) {
        return Err(Error::Dimension("all pairs must share one image size".into()));
    }
    let held = if val.is_empty() { train } else { val };
    let eval_seed = mix_seed(config.seed, 0xE7A1);
    let initial = heldout_image_loss(&net, held, eval_seed)?;
    let mut rng = seeded_rng(mix_seed(config.seed, 0x7EA1));
    let mut adam = Adam::new(net.params(), config.learning_rate);
    let mut history = Vec::with_capacity(config.steps);
    let mut last_val = initial;
    for step in 1..=config.steps {
        let batch = draw_batch(train, config, &mut rng)?;
        let (l_mf, l_img, mut grads) = batch_step(&net, &batch, config.lambda1)?;
        let l_base = l_mf + config.lambda1 * l_img;
        if !l_base.is_finite() || !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: non-finite loss or gradient (l_mf={l_mf}, l_img={l_img})"
            )));
        }
        grads.clip_global_norm(config.grad_clip);
        adam.step(net.params_mut(), &grads);
        let val_l_img = if step % config.eval_every == 0 || step == config.steps {
            last_val = heldout_image_loss(&net, held, eval_seed)?;
            Some(last_val)
        } else {
            None
        };
        let rec = LossRecord {
            step,
            l_base,
            l_mf,
            l_img,
            val_l_img,
        };
        on_record(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        net,
        history,
        initial_val_l_img: initial,
        final_val_l_img: last_val,
    })
}

/// Trained network plus the configuration and step count that produced it.
pub struct BackboneCheckpoint {
    pub config: BackboneConfig,
    pub step: usize,
    pub net: FlowNet,
}

impl BackboneCheckpoint {
    pub fn to_container(&self) -> Container {
        self.net.to_container(serde_json::json!({
            "kind": "backbone",
            "version": CHECKPOINT_VERSION,
            "config": self.config,
            "seed": self.config.seed,
            "step": self.step,
        }))
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
        if meta.get("kind").and_then(|k| k.as_str()) != Some("backbone") {
            return Err(Error::format(origin, "not a backbone checkpoint"));
        }
        let version = meta.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version:?}")));
        }
        let config: BackboneConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(origin, format!("bad config block: {e}")))?;
        let step = meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let net = FlowNet::from_container(&config.net_shape(), config.seed, c, origin)?;
        Ok(Self { config, step, net })
    }
}
