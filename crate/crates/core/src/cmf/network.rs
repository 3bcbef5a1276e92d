//! Conditional U-Net predicting the average velocity `u(x_t, x_A, r, t)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, DualGraph, Graph, ParamId, ParamStore, Tape, Tensor};

use super::TimePair;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 8 {
            return Err(Error::spec("base_width", format!("must be >= 8, got {}", self.base_width)));
        }
        if self.depth < 2 {
            return Err(Error::spec("depth", format!("must be >= 2, got {}", self.depth)));
        }
        if self.embed_dim < 4 || self.embed_dim % 4 != 0 {
            return Err(Error::spec(
                "embed_dim",
                format!("must be a positive multiple of 4, got {}", self.embed_dim),
            ));
        }
        Ok(())
    }

    /// Images must be divisible by this factor on both axes.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Shared flow-field interface so rollouts and targets can run against the
/// learned network or simple closed-form models.
pub trait FlowModel {
    fn flow(&self, x: &Array2<f64>, x_a: &Array2<f64>, tp: TimePair) -> Result<Array2<f64>>;

    /// Returns `(u, du/dt)` where the derivative follows the tangent
    /// `(dx, dr, dt) = (v, 0, 1)`.
    fn flow_jvp(
        &self,
        x: &Array2<f64>,
        x_a: &Array2<f64>,
        tp: TimePair,
        v: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// Frequencies (cycles per unit time) from 1 down to 1e-4, log-spaced.
fn frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|j| (-(j as f64) / (n - 1) as f64 * 4.0 * std::f64::consts::LN_10).exp())
        .collect()
}

/// Sinusoidal features `[sin, cos](2π f r)`, `[sin, cos](2π f t)` and `t - r`,
/// plus their derivative with respect to `t` at fixed `r`.
pub fn time_features(tp: TimePair, embed_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let freqs = frequencies(embed_dim / 4);
    let mut value = Vec::with_capacity(embed_dim + 1);
    let mut dt = Vec::with_capacity(embed_dim + 1);
    for (s, ds) in [(tp.r, 0.0), (tp.t, 1.0)] {
        for &f in &freqs {
            let w = 2.0 * std::f64::consts::PI * f;
            value.push((w * s).sin());
            dt.push(ds * w * (w * s).cos());
        }
        for &f in &freqs {
            let w = 2.0 * std::f64::consts::PI * f;
            value.push((w * s).cos());
            dt.push(-ds * w * (w * s).sin());
        }
    }
    value.push(tp.t - tp.r);
    dt.push(1.0);
    (value, dt)
}

pub(crate) struct Lin {
    w: ParamId,
    b: ParamId,
}

pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
}

struct ResBlock {
    conv1: Conv,
    scale: Lin,
    shift: Lin,
    conv2: Conv,
    skip: Option<Conv>,
}

pub struct FlowNet {
    shape: NetShape,
    seed: u64,
    params: ParamStore,
    emb1: Lin,
    emb2: Lin,
    stem: Conv,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    head: Conv,
}

pub(crate) fn lin(p: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str, din: usize, dout: usize, gain: f64) -> Lin {
    let bound = gain * (3.0 / din as f64).sqrt();
    Lin {
        w: p.uniform(&format!("{name}.w"), &[dout, din], bound, rng),
        b: p.constant(&format!("{name}.b"), &[dout], 0.0),
    }
}

pub(crate) fn conv(
    p: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
) -> Conv {
    let bound = gain * (3.0 / (cin * k * k) as f64).sqrt();
    Conv {
        w: p.uniform(&format!("{name}.w"), &[cout, cin, k, k], bound, rng),
        b: p.constant(&format!("{name}.b"), &[cout], 0.0),
    }
}

fn res_block(
    p: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    embed: usize,
) -> ResBlock {
    ResBlock {
        conv1: conv(p, rng, &format!("{name}.conv1"), cin, cout, 3, 1.0),
        scale: lin(p, rng, &format!("{name}.scale"), embed, cout, 0.1),
        shift: lin(p, rng, &format!("{name}.shift"), embed, cout, 0.1),
        conv2: conv(p, rng, &format!("{name}.conv2"), cout, cout, 3, 0.5),
        skip: (cin != cout).then(|| conv(p, rng, &format!("{name}.skip"), cin, cout, 1, 1.0)),
    }
}

impl FlowNet {
    pub fn new(shape: &NetShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = seeded_rng(seed);
        let mut p = ParamStore::new();
        let e = shape.embed_dim;
        let emb1 = lin(&mut p, &mut rng, "embed.fc1", e + 1, e, 1.0);
        let emb2 = lin(&mut p, &mut rng, "embed.fc2", e, e, 1.0);
        let stem = conv(&mut p, &mut rng, "stem", 2, shape.width(0), 3, 1.0);
        let mut down = Vec::new();
        let mut cin = shape.width(0);
        for l in 0..shape.depth {
            down.push(res_block(&mut p, &mut rng, &format!("down{l}"), cin, shape.width(l), e));
            cin = shape.width(l);
        }
        let mid = res_block(&mut p, &mut rng, "mid", cin, cin, e);
        let mut up = Vec::new();
        for l in (0..shape.depth).rev() {
            let skip = shape.width(l);
            up.push(res_block(&mut p, &mut rng, &format!("up{l}"), cin + skip, skip, e));
            cin = skip;
        }
        let head = conv(&mut p, &mut rng, "head", cin + 2, 1, 3, 0.1);
        Ok(Self {
            shape: shape.clone(),
            seed,
            params: p,
            emb1,
            emb2,
            stem,
            down,
            mid,
            up,
            head,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_image_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = self.shape.size_multiple();
        if h % m != 0 || w % m != 0 || h < m || w < m {
            return Err(Error::Dimension(format!(
                "image {h}x{w} must be divisible by {m} for depth {}",
                self.shape.depth
            )));
        }
        Ok(())
    }

    pub(crate) fn lin_fwd<G: Graph>(g: &mut G, l: &Lin, x: &G::Var) -> G::Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        g.linear(x, &w, &b)
    }

    pub(crate) fn conv_fwd<G: Graph>(g: &mut G, c: &Conv, x: &G::Var) -> G::Var {
        let w = g.param(c.w);
        let b = g.param(c.b);
        g.conv2d(x, &w, &b)
    }

    fn block_fwd<G: Graph>(g: &mut G, blk: &ResBlock, x: &G::Var, cond: &G::Var) -> G::Var {
        let a = g.silu(x);
        let h = Self::conv_fwd(g, &blk.conv1, &a);
        let s = Self::lin_fwd(g, &blk.scale, cond);
        let b = Self::lin_fwd(g, &blk.shift, cond);
        let h = g.film(&h, &s, &b);
        let h = g.silu(&h);
        let h = Self::conv_fwd(g, &blk.conv2, &h);
        let skip = match &blk.skip {
            Some(c) => Self::conv_fwd(g, c, x),
            None => x.clone(),
        };
        g.add(&h, &skip)
    }

    /// Network body on any backend. `input` is `[N, 2, H, W]` (state, source),
    /// `time` is `[N, embed_dim + 1]` from [`time_features`].
    pub fn forward_graph<G: Graph>(&self, g: &mut G, input: &G::Var, time: &G::Var) -> G::Var {
        let c = Self::lin_fwd(g, &self.emb1, time);
        let c = g.silu(&c);
        let c = Self::lin_fwd(g, &self.emb2, &c);
        let cond = g.silu(&c);

        let mut h = Self::conv_fwd(g, &self.stem, input);
        let mut skips = Vec::with_capacity(self.shape.depth);
        for (l, blk) in self.down.iter().enumerate() {
            h = Self::block_fwd(g, blk, &h, &cond);
            skips.push(h.clone());
            if l + 1 < self.shape.depth {
                h = g.avg_pool(&h, 2);
            }
        }
        h = Self::block_fwd(g, &self.mid, &h, &cond);
        for (i, blk) in self.up.iter().enumerate() {
            if i > 0 {
                h = g.upsample2(&h);
            }
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&h, &skip);
            h = Self::block_fwd(g, blk, &h, &cond);
        }
        let h = g.silu(&h);
        let h = g.concat(&h, input);
        Self::conv_fwd(g, &self.head, &h)
    }

    /// Stacks states and sources into `[N, 2, H, W]`.
    pub fn pack_input(states: &[&Array2<f64>], sources: &[&Array2<f64>]) -> Tensor {
        let (h, w) = states[0].dim();
        let mut data = Vec::with_capacity(states.len() * 2 * h * w);
        for (x, a) in states.iter().zip(sources) {
            data.extend(x.iter());
            data.extend(a.iter());
        }
        Tensor::from_vec(&[states.len(), 2, h, w], data)
    }

    pub fn pack_time(&self, pairs: &[TimePair]) -> (Tensor, Tensor) {
        let d = self.shape.embed_dim + 1;
        let mut v = Vec::with_capacity(pairs.len() * d);
        let mut dt = Vec::with_capacity(pairs.len() * d);
        for tp in pairs {
            let (a, b) = time_features(*tp, self.shape.embed_dim);
            v.extend(a);
            dt.extend(b);
        }
        (Tensor::from_vec(&[pairs.len(), d], v.clone()), Tensor::from_vec(&[pairs.len(), d], dt))
    }

    /// Conditioning vector `c_emb` (before the per-block activations).
    pub fn rt_embed(&self, tp: TimePair) -> Result<Vec<f64>> {
        tp.validate()?;
        let (time, _) = self.pack_time(&[tp]);
        let mut g = DualGraph::new(&self.params);
        let x = g.input(time, None);
        let c = Self::lin_fwd(&mut g, &self.emb1, &x);
        let c = g.silu(&c);
        let c = Self::lin_fwd(&mut g, &self.emb2, &c);
        Ok(c.into_parts().0.into_data())
    }

    fn check_inputs(&self, xs: &[&Array2<f64>], sources: &[&Array2<f64>], tps: &[TimePair]) -> Result<()> {
        if xs.is_empty() || xs.len() != sources.len() || xs.len() != tps.len() {
            return Err(Error::Dimension("batch components differ in length".into()));
        }
        let dim = xs[0].dim();
        for (x, a) in xs.iter().zip(sources) {
            if x.dim() != dim || a.dim() != dim {
                return Err(Error::Dimension(format!(
                    "state {:?} and source {:?} must match {:?}",
                    x.dim(),
                    a.dim(),
                    dim
                )));
            }
        }
        self.check_image_dims(dim.0, dim.1)?;
        for tp in tps {
            tp.validate()?;
        }
        Ok(())
    }

    fn unpack(out: Tensor, n: usize, h: usize, w: usize) -> Vec<Array2<f64>> {
        let data = out.into_data();
        (0..n)
            .map(|i| Array2::from_shape_vec((h, w), data[i * h * w..(i + 1) * h * w].to_vec()).unwrap())
            .collect()
    }

    /// Batched evaluation without tangents.
    pub fn flow_batch(
        &self,
        xs: &[&Array2<f64>],
        sources: &[&Array2<f64>],
        tps: &[TimePair],
    ) -> Result<Vec<Array2<f64>>> {
        self.check_inputs(xs, sources, tps)?;
        let (h, w) = xs[0].dim();
        let mut g = DualGraph::new(&self.params);
        let input = g.input(Self::pack_input(xs, sources), None);
        let time = g.input(self.pack_time(tps).0, None);
        let out = self.forward_graph(&mut g, &input, &time).into_parts().0;
        if !out.is_finite() {
            return Err(Error::Numerical("flow network produced non-finite output".into()));
        }
        Ok(Self::unpack(out, xs.len(), h, w))
    }

    /// Batched `(u, du/dt)` along `(v, 0, 1)`.
    pub fn flow_jvp_batch(
        &self,
        xs: &[&Array2<f64>],
        sources: &[&Array2<f64>],
        tps: &[TimePair],
        vs: &[&Array2<f64>],
    ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        self.check_inputs(xs, sources, tps)?;
        let (h, w) = xs[0].dim();
        if vs.len() != xs.len() || vs.iter().any(|v| v.dim() != (h, w)) {
            return Err(Error::Dimension("velocity batch does not match states".into()));
        }
        let zeros = Array2::<f64>::zeros((h, w));
        let zero_refs: Vec<&Array2<f64>> = vec![&zeros; xs.len()];
        let mut g = DualGraph::new(&self.params);
        let input = g.input(
            Self::pack_input(xs, sources),
            Some(Self::pack_input(vs, &zero_refs)),
        );
        let (tv, tdt) = self.pack_time(tps);
        let time = g.input(tv, Some(tdt));
        let (u, du) = self.forward_graph(&mut g, &input, &time).into_parts();
        let du = du.expect("time input carries a tangent");
        if !u.is_finite() || !du.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite JVP: |u|^2 = {}, |du/dt|^2 = {}",
                u.sq_norm(),
                du.sq_norm()
            )));
        }
        Ok((Self::unpack(u, xs.len(), h, w), Self::unpack(du, xs.len(), h, w)))
    }

    /// Records a batched forward on `tape`; returns the output node.
    pub(crate) fn forward_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        xs: &[&Array2<f64>],
        sources: &[&Array2<f64>],
        tps: &[TimePair],
    ) -> crate::nn::NodeId {
        let input = tape.input(Self::pack_input(xs, sources));
        let time = tape.input(self.pack_time(tps).0);
        self.forward_graph(tape, &input, &time)
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::with_meta(meta);
        for p in self.params.iter() {
            c.push(&p.name, p.value.shape(), ArrayData::F64(p.value.data().to_vec()));
        }
        c
    }

    /// Loads parameter arrays from `c` into a freshly built network of `shape`.
    pub fn from_container(shape: &NetShape, seed: u64, c: &Container, origin: &str) -> Result<Self> {
        let mut net = Self::new(shape, seed)?;
        let named: Vec<(String, Tensor)> = c
            .arrays
            .iter()
            .map(|a| match &a.data {
                ArrayData::F64(v) => Ok((a.name.clone(), Tensor::from_vec(&a.shape, v.clone()))),
                _ => Err(Error::format(origin, format!("parameter `{}` must be f64", a.name))),
            })
            .collect::<Result<_>>()?;
        net.params
            .load_named(&named)
            .map_err(|reason| Error::format(origin, reason))?;
        Ok(net)
    }
}

impl FlowModel for FlowNet {
    fn flow(&self, x: &Array2<f64>, x_a: &Array2<f64>, tp: TimePair) -> Result<Array2<f64>> {
        Ok(self.flow_batch(&[x], &[x_a], &[tp])?.remove(0))
    }

    fn flow_jvp(
        &self,
        x: &Array2<f64>,
        x_a: &Array2<f64>,
        tp: TimePair,
        v: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (mut u, mut du) = self.flow_jvp_batch(&[x], &[x_a], &[tp], &[v])?;
        Ok((u.remove(0), du.remove(0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> NetShape {
        NetShape {
            base_width: 8,
            depth: 2,
            embed_dim: 16,
        }
    }

    fn random_image(rng: &mut impl Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_matches_image_shape_and_is_deterministic() {
        let net = FlowNet::new(&tiny(), 3).unwrap();
        let mut rng = seeded_rng(1);
        let x = random_image(&mut rng, 32);
        let a = random_image(&mut rng, 32);
        let tp = TimePair::new(0.2, 0.7).unwrap();
        let u1 = net.flow(&x, &a, tp).unwrap();
        let u2 = net.flow(&x, &a, tp).unwrap();
        assert_eq!(u1.dim(), (32, 32));
        assert_eq!(u1, u2);
    }

    #[test]
    fn zero_inputs_give_finite_output() {
        let net = FlowNet::new(&tiny(), 0).unwrap();
        let z = Array2::zeros((16, 16));
        let u = net.flow(&z, &z, TimePair::new(0.0, 1.0).unwrap()).unwrap();
        assert!(u.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_shapes_are_dimension_errors() {
        let net = FlowNet::new(&tiny(), 0).unwrap();
        let a = Array2::zeros((16, 16));
        let b = Array2::zeros((16, 8));
        let err = net.flow(&a, &b, TimePair::new(0.0, 1.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let odd = Array2::zeros((15, 15));
        assert!(matches!(
            net.flow(&odd, &odd, TimePair::new(0.0, 1.0).unwrap()).unwrap_err(),
            Error::Dimension(_)
        ));
    }

    #[test]
    fn embedding_shape_and_distinctness() {
        let net = FlowNet::new(&tiny(), 0).unwrap();
        let a = net.rt_embed(TimePair::new(0.3, 0.3).unwrap()).unwrap();
        let b = net.rt_embed(TimePair::new(0.3, 0.3).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let c = net.rt_embed(TimePair::new(0.0, 1.0).unwrap()).unwrap();
        let d = net.rt_embed(TimePair::new(0.5, 0.5).unwrap()).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&c) - norm(&d)).abs() > 0.0);
    }

    #[test]
    fn time_feature_derivative_matches_finite_difference() {
        let h = 1e-6;
        let tp = TimePair { r: 0.2, t: 0.6 };
        let (_, dt) = time_features(tp, 16);
        let (plus, _) = time_features(TimePair { r: 0.2, t: 0.6 + h }, 16);
        let (minus, _) = time_features(TimePair { r: 0.2, t: 0.6 - h }, 16);
        for i in 0..dt.len() {
            let fd = (plus[i] - minus[i]) / (2.0 * h);
            assert!((fd - dt[i]).abs() < 1e-6, "feature {i}: {fd} vs {}", dt[i]);
        }
    }

    #[test]
    fn bad_shape_config_names_field() {
        let err = FlowNet::new(&NetShape { base_width: 4, ..tiny() }, 0).err().unwrap();
        assert!(err.to_string().contains("base_width"));
        let err = FlowNet::new(&NetShape { embed_dim: 18, ..tiny() }, 0).err().unwrap();
        assert!(err.to_string().contains("embed_dim"));
    }
}
