//! Conditional MeanFlow: network, training objective and backbone training.

pub(crate) mod network;
mod train;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

pub use network::{time_features, FlowModel, FlowNet, NetShape};
pub use train::{
    heldout_image_loss, train_backbone, BackboneCheckpoint, LossRecord, TrainOutcome,
    HELDOUT_TIMES,
};

/// Interval endpoints with `0 <= r <= t <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePair {
    pub r: f64,
    pub t: f64,
}

impl TimePair {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        let tp = Self { r, t };
        tp.validate()?;
        Ok(tp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.r && self.r <= self.t && self.t <= 1.0) {
            return Err(Error::Precondition(format!(
                "time pair needs 0 <= r <= t <= 1, got r={}, t={}",
                self.r, self.t
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    /// Weight of the one-step image loss.
    pub lambda1: f64,
    pub r_equals_t_prob: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip applied before each Adam step.
    pub grad_clip: f64,
    /// Held-out image loss is evaluated every this many steps (and at the end).
    pub eval_every: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            depth: 3,
            embed_dim: 256,
            lambda1: 1.0,
            r_equals_t_prob: 0.5,
            learning_rate: 1e-4,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            grad_clip: 1.0,
            eval_every: 100,
        }
    }
}

impl BackboneConfig {
    pub fn net_shape(&self) -> NetShape {
        NetShape {
            base_width: self.base_width,
            depth: self.depth,
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_shape().validate()?;
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(Error::spec("lambda1", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.r_equals_t_prob) {
            return Err(Error::spec("r_equals_t_prob", "must lie in [0, 1]"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::spec("learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::spec("batch_size", "must be >= 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::spec("grad_clip", "must be > 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::spec("eval_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// One supervised example with its noise draw and derived trajectory quantities.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub x_a: Array2<f64>,
    pub x_b: Array2<f64>,
    pub e: Array2<f64>,
    pub x_t: Array2<f64>,
    pub v: Array2<f64>,
    pub time: TimePair,
}

impl TrainingSample {
    pub fn new(x_a: Array2<f64>, x_b: Array2<f64>, e: Array2<f64>, time: TimePair) -> Result<Self> {
        ensure_same_shape("x_A vs x_B", x_a.shape(), x_b.shape())?;
        let x_t = make_intermediate(&x_b, &e, time.t)?;
        let v = velocity(&x_b, &e)?;
        Ok(Self {
            x_a,
            x_b,
            e,
            x_t,
            v,
            time,
        })
    }
}

/// `x_t = (1 - t) x_B + t e`.
pub fn make_intermediate(x_b: &Array2<f64>, e: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    ensure_same_shape("x_B vs noise", x_b.shape(), e.shape())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("t must lie in [0, 1], got {t}")));
    }
    let mut out = x_b.clone();
    out.zip_mut_with(e, |b, &n| *b = (1.0 - t) * *b + t * n);
    Ok(out)
}

/// `v = e - x_B`.
pub fn velocity(x_b: &Array2<f64>, e: &Array2<f64>) -> Result<Array2<f64>> {
    ensure_same_shape("x_B vs noise", x_b.shape(), e.shape())?;
    Ok(e - x_b)
}

/// `u* = v - (t - r) du/dt`, with `du/dt` the JVP along `(v, 0, 1)`. The result
/// is a plain array: nothing downstream differentiates through it.
pub fn meanflow_target(
    net: &impl FlowModel,
    x_t: &Array2<f64>,
    x_a: &Array2<f64>,
    tp: TimePair,
    v: &Array2<f64>,
) -> Result<Array2<f64>> {
    tp.validate()?;
    ensure_same_shape("x_t vs v", x_t.shape(), v.shape())?;
    if tp.r == tp.t {
        return Ok(v.clone());
    }
    let (_, du) = net.flow_jvp(x_t, x_a, tp, v)?;
    if du.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite JVP at r={}, t={}",
            tp.r, tp.t
        )));
    }
    let w = tp.t - tp.r;
    let mut out = v.clone();
    out.zip_mut_with(&du, |a, &d| *a -= w * d);
    Ok(out)
}

fn mean_abs_diff(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<f64> {
    ensure_same_shape(what, a.shape(), b.shape())?;
    if a.is_empty() {
        return Err(Error::Precondition(format!("{what}: empty images")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean absolute difference between prediction and MeanFlow target.
pub fn meanflow_loss(u_pred: &Array2<f64>, u_star: &Array2<f64>) -> Result<f64> {
    mean_abs_diff(u_pred, u_star, "meanflow loss")
}

/// Mean absolute difference between the one-step reconstruction and the target.
pub fn image_loss(x0_hat: &Array2<f64>, x_b: &Array2<f64>) -> Result<f64> {
    mean_abs_diff(x0_hat, x_b, "image loss")
}

/// `x̂₀ = x_t - t u(x_t, x_A, 0, t)`; exactly `x_t` at `t = 0`.
pub fn reconstruct_one_step(
    net: &impl FlowModel,
    x_t: &Array2<f64>,
    x_a: &Array2<f64>,
    t: f64,
) -> Result<Array2<f64>> {
    let tp = TimePair::new(0.0, t)?;
    if t == 0.0 {
        return Ok(x_t.clone());
    }
    let u = net.flow(x_t, x_a, tp)?;
    Ok(x_t - &(u * t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_mf: f64,
    pub l_img: f64,
}

impl LossParts {
    pub fn combine(l_mf: f64, l_img: f64, lambda1: f64) -> Self {
        Self {
            total: l_mf + lambda1 * l_img,
            l_mf,
            l_img,
        }
    }
}

/// `L_base = L_mf + λ₁ L_img` for a single sample.
pub fn base_loss(sample: &TrainingSample, net: &impl FlowModel, lambda1: f64) -> Result<LossParts> {
    let u_star = meanflow_target(net, &sample.x_t, &sample.x_a, sample.time, &sample.v)?;
    let u_pred = net.flow(&sample.x_t, &sample.x_a, sample.time)?;
    let l_mf = meanflow_loss(&u_pred, &u_star)?;
    let x0 = reconstruct_one_step(net, &sample.x_t, &sample.x_a, sample.time.t)?;
    let l_img = image_loss(&x0, &sample.x_b)?;
    Ok(LossParts::combine(l_mf, l_img, lambda1))
}

/// `t ~ U(0,1)`; with probability `r_equals_t_prob` `r = t`, else `r ~ U(0, t)`.
pub fn sample_time_pair(rng: &mut impl Rng, r_equals_t_prob: f64) -> TimePair {
    let t: f64 = rng.random();
    let same = rng.random::<f64>() < r_equals_t_prob;
    let r = if same { t } else { rng.random::<f64>() * t };
    TimePair { r, t }
}

/// Closed-form flow models used as oracles in tests.
pub mod oracle {
    use super::*;

    /// `u ≡ c` regardless of inputs.
    pub struct ConstantFlow(pub f64);

    impl FlowModel for ConstantFlow {
        fn flow(&self, x: &Array2<f64>, _: &Array2<f64>, _: TimePair) -> Result<Array2<f64>> {
            Ok(Array2::from_elem(x.dim(), self.0))
        }

        fn flow_jvp(
            &self,
            x: &Array2<f64>,
            a: &Array2<f64>,
            tp: TimePair,
            _: &Array2<f64>,
        ) -> Result<(Array2<f64>, Array2<f64>)> {
            Ok((self.flow(x, a, tp)?, Array2::zeros(x.dim())))
        }
    }

    /// `u = x`, so the tangent along `(v, 0, 1)` is `v`.
    pub struct StateIdentityFlow;

    impl FlowModel for StateIdentityFlow {
        fn flow(&self, x: &Array2<f64>, _: &Array2<f64>, _: TimePair) -> Result<Array2<f64>> {
            Ok(x.clone())
        }

        fn flow_jvp(
            &self,
            x: &Array2<f64>,
            _: &Array2<f64>,
            _: TimePair,
            v: &Array2<f64>,
        ) -> Result<(Array2<f64>, Array2<f64>)> {
            Ok((x.clone(), v.clone()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use rand::Rng;
    use crate::nn::seeded_rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand_distr::StandardNormal;

    fn noise(rng: &mut impl Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn intermediate_endpoints_and_midpoint() {
        let mut rng = seeded_rng(0);
        let b = noise(&mut rng, 8);
        let e = noise(&mut rng, 8);
        assert_eq!(make_intermediate(&b, &e, 0.0).unwrap(), b);
        assert_eq!(make_intermediate(&b, &e, 1.0).unwrap(), e);
        let xb = Array2::from_elem((4, 4), 0.2);
        let ones = Array2::from_elem((4, 4), 1.0);
        let mid = make_intermediate(&xb, &ones, 0.5).unwrap();
        assert!(mid.iter().all(|v| (v - 0.6).abs() < 1e-15));
        assert!(matches!(make_intermediate(&b, &e, 1.5), Err(Error::Precondition(_))));
    }

    #[test]
    fn target_identities() {
        let mut rng = seeded_rng(1);
        let x = noise(&mut rng, 8);
        let a = noise(&mut rng, 8);
        let v = noise(&mut rng, 8);
        let same = TimePair::new(0.4, 0.4).unwrap();
        assert_eq!(meanflow_target(&StateIdentityFlow, &x, &a, same, &v).unwrap(), v);
        let tp = TimePair::new(0.1, 0.7).unwrap();
        assert_eq!(meanflow_target(&ConstantFlow(3.0), &x, &a, tp, &v).unwrap(), v);
        let got = meanflow_target(&StateIdentityFlow, &x, &a, tp, &v).unwrap();
        let want = &v * (1.0 - 0.6);
        assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-12));
    }

    #[test]
    fn loss_examples() {
        let a = Array2::from_elem((4, 4), 0.3);
        assert_eq!(meanflow_loss(&a, &a).unwrap(), 0.0);
        assert!((meanflow_loss(&(&a + 0.5), &a).unwrap() - 0.5).abs() < 1e-15);
        assert!((image_loss(&(&a + 0.2), &a).unwrap() - 0.2).abs() < 1e-15);
        assert!((image_loss(&(&a - 0.2), &a).unwrap() - 0.2).abs() < 1e-15);
        let b = Array2::zeros((4, 5));
        assert!(matches!(image_loss(&a, &b), Err(Error::Dimension(_))));
        let parts = LossParts::combine(0.2, 0.1, 1.0);
        assert!((parts.total - 0.3).abs() < 1e-15);
        assert_eq!(LossParts::combine(0.2, 0.1, 0.0).total, 0.2);
    }

    #[test]
    fn one_step_reconstruction_examples() {
        let x = Array2::from_elem((4, 4), 0.6);
        let a = Array2::zeros((4, 4));
        assert_eq!(reconstruct_one_step(&ConstantFlow(7.0), &x, &a, 0.0).unwrap(), x);
        assert_eq!(reconstruct_one_step(&ConstantFlow(0.0), &x, &a, 0.5).unwrap(), x);
        let got = reconstruct_one_step(&ConstantFlow(1.0), &x, &a, 0.5).unwrap();
        assert!(got.iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn base_loss_components_are_consistent() {
        let mut rng = seeded_rng(2);
        let s = TrainingSample::new(noise(&mut rng, 8), noise(&mut rng, 8), noise(&mut rng, 8), TimePair::new(0.2, 0.9).unwrap()).unwrap();
        let p = base_loss(&s, &StateIdentityFlow, 0.0).unwrap();
        assert_eq!(p.total, p.l_mf);
        assert!(p.l_mf >= 0.0 && p.l_img >= 0.0);
    }

    #[test]
    fn time_pair_sampling_statistics() {
        let mut rng = seeded_rng(3);
        let n = 10_000;
        let mut equal = 0;
        for _ in 0..n {
            let tp = sample_time_pair(&mut rng, 0.5);
            assert!(0.0 <= tp.r && tp.r <= tp.t && tp.t <= 1.0);
            equal += (tp.r == tp.t) as usize;
        }
        let frac = equal as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.03, "{frac}");
        for _ in 0..100 {
            let tp = sample_time_pair(&mut rng, 1.0);
            assert_eq!(tp.r, tp.t);
        }
    }

    proptest! {
        #[test]
        fn sampled_pairs_are_ordered(seed in any::<u64>(), p in 0.0f64..=1.0) {
            let mut rng = seeded_rng(seed);
            for _ in 0..50 {
                let tp = sample_time_pair(&mut rng, p);
                prop_assert!(tp.validate().is_ok());
            }
        }

        #[test]
        fn losses_are_nonnegative(vals in proptest::collection::vec(-10.0f64..10.0, 32)) {
            let a = Array2::from_shape_vec((4, 8), vals[..32].to_vec()).unwrap();
            let b = a.mapv(|v| v * 0.5 - 1.0);
            prop_assert!(meanflow_loss(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(image_loss(&a, &a).unwrap(), 0.0);
        }
    }
}
