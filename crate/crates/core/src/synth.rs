//! Deterministic synthetic paired images with spatially heterogeneous
//! degradation, plus the on-disk pair and manifest formats.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, ArrayData, Container};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// Fixed blur bank used to approximate a spatially varying Gaussian blur.
pub const BLUR_BANK: [f64; 4] = [0.0, 1.0, 2.0, 4.0];

/// Normalized intensity of air / outside the body.
pub const BACKGROUND_LEVEL: f64 = -1.0;

/// Display-only map from normalized intensity to a pseudo-HU window [-1024, 1024].
pub fn to_pseudo_hu(v: f64) -> f64 {
    v * 1024.0
}

pub fn from_pseudo_hu(hu: f64) -> f64 {
    hu / 1024.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_lesions: usize,
    /// Lesion radius range in pixels, `[min, max]`.
    pub lesion_radius_range: [f64; 2],
    /// Correlation length of the in-body texture, in pixels.
    pub background_texture_scale: f64,
    /// `[body, lesion]` levels on the normalized [0, 1] scale; mapped to [-1, 1].
    pub intensity_range: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            n_lesions: 2,
            lesion_radius_range: [2.5, 4.0],
            background_texture_scale: 1.5,
            intensity_range: [0.4, 0.8],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 {
            return Err(Error::spec("height", format!("must be >= 16, got {}", self.height)));
        }
        if self.width < 16 {
            return Err(Error::spec("width", format!("must be >= 16, got {}", self.width)));
        }
        let [rmin, rmax] = self.lesion_radius_range;
        if !(rmin.is_finite() && rmax.is_finite() && rmin > 0.0 && rmin <= rmax) {
            return Err(Error::spec(
                "lesion_radius_range",
                format!("need 0 < min <= max, got [{rmin}, {rmax}]"),
            ));
        }
        let limit = self.height.min(self.width) as f64 * 0.25;
        if rmax > limit {
            return Err(Error::spec(
                "lesion_radius_range",
                format!("max radius {rmax} does not fit inside a {}x{} body", self.height, self.width),
            ));
        }
        if !(self.background_texture_scale.is_finite() && self.background_texture_scale > 0.0) {
            return Err(Error::spec("background_texture_scale", "must be positive"));
        }
        let [lo, hi] = self.intensity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::spec(
                "intensity_range",
                format!("need 0 <= body < lesion <= 1, got [{lo}, {hi}]"),
            ));
        }
        Ok(())
    }
}

/// Clean target with its masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub target: Array2<f64>,
    pub lesion_mask: Array2<u8>,
    pub body_mask: Array2<u8>,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = seeded_rng(spec.seed);
    let cy = h as f64 / 2.0 - 0.5 + rng.random_range(-1.0..1.0);
    let cx = w as f64 / 2.0 - 0.5 + rng.random_range(-1.0..1.0);
    let ay = h as f64 * rng.random_range(0.38..0.44);
    let ax = w as f64 * rng.random_range(0.38..0.44);
    let body_level = 2.0 * spec.intensity_range[0] - 1.0;
    let lesion_level = 2.0 * spec.intensity_range[1] - 1.0;

    // Band-limited texture: blurred white noise rescaled to a small amplitude.
    let white = Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal));
    let mut texture = gaussian_blur(&white, spec.background_texture_scale);
    let std = (texture.iter().map(|v| v * v).sum::<f64>() / (h * w) as f64).sqrt();
    if std > 0.0 {
        texture.mapv_inplace(|v| 0.04 * v / std);
    }

    let mut target = Array2::from_elem((h, w), BACKGROUND_LEVEL);
    let mut body_mask = Array2::<u8>::zeros((h, w));
    let min_axis = ay.min(ax);
    for ((y, x), t) in target.indexed_iter_mut() {
        let r = (((y as f64 - cy) / ay).powi(2) + ((x as f64 - cx) / ax).powi(2)).sqrt();
        if r <= 1.0 {
            body_mask[[y, x]] = 1;
        }
        let edge = ((1.0 - r) * min_axis + 0.5).clamp(0.0, 1.0);
        *t = BACKGROUND_LEVEL + (body_level + texture[[y, x]] - BACKGROUND_LEVEL) * edge;
    }

    let mut lesions: Vec<(f64, f64, f64)> = Vec::with_capacity(spec.n_lesions);
    let [rmin, rmax] = spec.lesion_radius_range;
    let mut attempts = 0;
    while lesions.len() < spec.n_lesions {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::spec(
                "n_lesions",
                format!("could not place {} separated lesions in a {h}x{w} body", spec.n_lesions),
            ));
        }
        let r = if rmin == rmax { rmin } else { rng.random_range(rmin..rmax) };
        let ly = rng.random_range(0.0..h as f64);
        let lx = rng.random_range(0.0..w as f64);
        // Keep the whole disk (plus a pixel) inside the ellipse.
        let shrink_y = ay - r - 1.5;
        let shrink_x = ax - r - 1.5;
        if shrink_y <= 0.0 || shrink_x <= 0.0 {
            continue;
        }
        if ((ly - cy) / shrink_y).powi(2) + ((lx - cx) / shrink_x).powi(2) > 1.0 {
            continue;
        }
        if lesions
            .iter()
            .any(|&(oy, ox, or)| ((oy - ly).powi(2) + (ox - lx).powi(2)).sqrt() < r + or + 3.0)
        {
            continue;
        }
        lesions.push((ly, lx, r));
    }

    let mut lesion_mask = Array2::<u8>::zeros((h, w));
    for &(ly, lx, r) in &lesions {
        for ((y, x), t) in target.indexed_iter_mut() {
            let d = ((y as f64 - ly).powi(2) + (x as f64 - lx).powi(2)).sqrt();
            if d <= r {
                lesion_mask[[y, x]] = 1;
            }
            let s = if d <= r - 1.0 {
                1.0
            } else if d < r + 0.5 {
                0.5 * (1.0 + (std::f64::consts::PI * (d - (r - 1.0)) / 1.5).cos())
            } else {
                0.0
            };
            *t += (lesion_level - *t) * s;
        }
    }
    target.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(Phantom {
        target,
        lesion_mask,
        body_mask,
    })
}

/// Separable Gaussian blur with mirrored borders. `sigma == 0` returns a copy.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[[y, reflect(x as isize + k as isize - radius, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[[reflect(y as isize + k as isize - radius, h), x]])
                .sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn contains(self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let top = y < h / 2;
        let left = x < w / 2;
        match self {
            Quadrant::TopLeft => top && left,
            Quadrant::TopRight => top && !left,
            Quadrant::BottomLeft => !top && left,
            Quadrant::BottomRight => !top && !left,
        }
    }
}

/// Per-pixel degradation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationField {
    pub blur_sigma: Array2<f64>,
    pub noise_sigma: Array2<f64>,
    pub contrast_gain: Array2<f64>,
    pub seed: u64,
}

impl DegradationField {
    pub fn identity(h: usize, w: usize) -> Self {
        Self::uniform(h, w, 0.0, 0.0, 1.0, 0)
    }

    pub fn uniform(h: usize, w: usize, blur: f64, noise: f64, gain: f64, seed: u64) -> Self {
        Self {
            blur_sigma: Array2::from_elem((h, w), blur),
            noise_sigma: Array2::from_elem((h, w), noise),
            contrast_gain: Array2::from_elem((h, w), gain),
            seed,
        }
    }

    /// Base parameters everywhere, `hot` parameters (blur, noise, gain) inside `quadrant`.
    pub fn quadrant(
        h: usize,
        w: usize,
        quadrant: Quadrant,
        base: (f64, f64, f64),
        hot: (f64, f64, f64),
        seed: u64,
    ) -> Self {
        let pick = |y, x| if quadrant.contains(y, x, h, w) { hot } else { base };
        Self {
            blur_sigma: Array2::from_shape_fn((h, w), |(y, x)| pick(y, x).0),
            noise_sigma: Array2::from_shape_fn((h, w), |(y, x)| pick(y, x).1),
            contrast_gain: Array2::from_shape_fn((h, w), |(y, x)| pick(y, x).2),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.blur_sigma.dim();
        if self.noise_sigma.dim() != dim || self.contrast_gain.dim() != dim {
            return Err(Error::Dimension("degradation maps differ in shape".into()));
        }
        if self.blur_sigma.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::spec("blur_sigma_map", "must be finite and >= 0"));
        }
        if self.noise_sigma.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::spec("noise_sigma_map", "must be finite and >= 0"));
        }
        if self.contrast_gain.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::spec("contrast_gain_map", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// `clip(gain * blur(target) + noise, -1, 1)` with a per-pixel blur interpolated
/// between the copies in [`BLUR_BANK`].
pub fn degrade(target: &Array2<f64>, field: &DegradationField) -> Result<Array2<f64>> {
    field.validate()?;
    if target.dim() != field.blur_sigma.dim() {
        return Err(Error::Dimension(format!(
            "target is {:?} but degradation field is {:?}",
            target.dim(),
            field.blur_sigma.dim()
        )));
    }
    let max_sigma = field.blur_sigma.iter().cloned().fold(0.0, f64::max);
    let bank: Vec<Option<Array2<f64>>> = BLUR_BANK
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let needed = i == 0 || BLUR_BANK[i - 1] < max_sigma;
            needed.then(|| gaussian_blur(target, s))
        })
        .collect();
    let mut rng = seeded_rng(field.seed);
    let mut out = Array2::<f64>::zeros(target.dim());
    let top = *BLUR_BANK.last().unwrap();
    for ((idx, o), &sigma) in out.indexed_iter_mut().zip(field.blur_sigma.iter()) {
        let z: f64 = rng.sample(StandardNormal);
        let s = sigma.min(top);
        let blurred = match BLUR_BANK.iter().position(|&b| b == s) {
            Some(i) => bank[i].as_ref().unwrap()[idx],
            None => {
                let i = BLUR_BANK.iter().rposition(|&b| b < s).unwrap();
                let wgt = (s - BLUR_BANK[i]) / (BLUR_BANK[i + 1] - BLUR_BANK[i]);
                let lo = bank[i].as_ref().unwrap()[idx];
                let hi = bank[i + 1].as_ref().unwrap()[idx];
                (1.0 - wgt) * lo + wgt * hi
            }
        };
        let v = field.contrast_gain[idx] * blurred + field.noise_sigma[idx] * z;
        *o = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Supervised training unit: degraded source, clean target and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub pair_id: String,
    pub seed: u64,
    pub source: Array2<f32>,
    pub target: Array2<f32>,
    pub body_mask: Array2<u8>,
    pub lesion_mask: Array2<u8>,
}

impl ImagePair {
    pub fn dim(&self) -> (usize, usize) {
        self.target.dim()
    }

    pub fn source_f64(&self) -> Array2<f64> {
        self.source.mapv(f64::from)
    }

    pub fn target_f64(&self) -> Array2<f64> {
        self.target.mapv(f64::from)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.target.dim();
        if self.source.dim() != d || self.body_mask.dim() != d || self.lesion_mask.dim() != d {
            return Err(Error::Dimension(format!("pair {} arrays differ in shape", self.pair_id)));
        }
        for (name, img) in [("x_A", &self.source), ("x_B", &self.target)] {
            if img.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                return Err(Error::Precondition(format!(
                    "pair {}: {name} has values outside [-1, 1]",
                    self.pair_id
                )));
            }
        }
        for (name, m) in [("body_mask", &self.body_mask), ("lesion_mask", &self.lesion_mask)] {
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Precondition(format!(
                    "pair {}: {name} is not binary",
                    self.pair_id
                )));
            }
        }
        Ok(())
    }
}

fn image_array(c: &Container, name: &str, origin: &str) -> Result<Array2<f32>> {
    let a = c
        .get(name)
        .ok_or_else(|| Error::format(origin, format!("missing array `{name}`")))?;
    match (&a.data, a.shape.as_slice()) {
        (ArrayData::F32(v), [h, w]) => Ok(Array2::from_shape_vec((*h, *w), v.clone()).unwrap()),
        _ => Err(Error::format(origin, format!("array `{name}` must be 2-D f32"))),
    }
}

fn mask_array(c: &Container, name: &str, origin: &str) -> Result<Array2<u8>> {
    let a = c
        .get(name)
        .ok_or_else(|| Error::format(origin, format!("missing array `{name}`")))?;
    match (&a.data, a.shape.as_slice()) {
        (ArrayData::U8(v), [h, w]) => Ok(Array2::from_shape_vec((*h, *w), v.clone()).unwrap()),
        _ => Err(Error::format(origin, format!("array `{name}` must be 2-D u8"))),
    }
}

pub(crate) fn f32_array(img: &Array2<f32>) -> ArrayData {
    ArrayData::F32(img.iter().copied().collect())
}

pub fn write_pair(pair: &ImagePair, path: &Path) -> Result<()> {
    pair.validate()?;
    let (h, w) = pair.dim();
    let mut c = Container::with_meta(serde_json::json!({
        "kind": "image_pair",
        "version": 1,
        "pair_id": pair.pair_id,
        "seed": pair.seed,
    }));
    c.push("x_A", &[h, w], f32_array(&pair.source));
    c.push("x_B", &[h, w], f32_array(&pair.target));
    c.push("body_mask", &[h, w], ArrayData::U8(pair.body_mask.iter().copied().collect()));
    c.push("lesion_mask", &[h, w], ArrayData::U8(pair.lesion_mask.iter().copied().collect()));
    c.write(path)
}

pub fn read_pair(path: &Path) -> Result<ImagePair> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pair_bytes(&bytes, &path.display().to_string())
}

/// Parses pair-file bytes; `origin` labels errors.
pub fn read_pair_bytes(bytes: &[u8], origin: &str) -> Result<ImagePair> {
    let origin = origin.to_string();
    let c = Container::from_bytes(bytes, &origin)?;
    let meta = c
        .meta
        .as_ref()
        .ok_or_else(|| Error::format(&origin, "missing metadata line"))?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("image_pair") {
        return Err(Error::format(&origin, "not an image pair file"));
    }
    let pair_id = meta
        .get("pair_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format(&origin, "metadata lacks pair_id"))?
        .to_string();
    let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let pair = ImagePair {
        pair_id,
        seed,
        source: image_array(&c, "x_A", &origin)?,
        target: image_array(&c, "x_B", &origin)?,
        body_mask: mask_array(&c, "body_mask", &origin)?,
        lesion_mask: mask_array(&c, "lesion_mask", &origin)?,
    };
    pair.validate().map_err(|e| Error::format(&origin, e.to_string()))?;
    Ok(pair)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Uniform,
    /// One randomly chosen quadrant per pair receives the `hot_*` parameters.
    Quadrant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationTemplate {
    pub kind: DegradationKind,
    pub base_blur: f64,
    pub base_noise: f64,
    pub base_gain: f64,
    pub hot_blur: f64,
    pub hot_noise: f64,
    pub hot_gain: f64,
}

impl Default for DegradationTemplate {
    fn default() -> Self {
        Self {
            kind: DegradationKind::Quadrant,
            base_blur: 0.5,
            base_noise: 0.02,
            base_gain: 1.0,
            hot_blur: 1.5,
            hot_noise: 0.12,
            hot_gain: 0.95,
        }
    }
}

impl DegradationTemplate {
    pub fn field(&self, h: usize, w: usize, rng: &mut impl Rng, seed: u64) -> DegradationField {
        let base = (self.base_blur, self.base_noise, self.base_gain);
        match self.kind {
            DegradationKind::Uniform => DegradationField::uniform(h, w, base.0, base.1, base.2, seed),
            DegradationKind::Quadrant => {
                let q = Quadrant::ALL[rng.random_range(0..4)];
                DegradationField::quadrant(h, w, q, base, (self.hot_blur, self.hot_noise, self.hot_gain), seed)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::spec("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pair_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub pairs: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_vec_pretty(self).expect("manifest serializes");
        s.push(b'\n');
        s
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.pairs.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    /// Loads every pair of `split`, resolving paths against `base_dir`.
    pub fn load_split(&self, base_dir: &Path, split: Split) -> Result<Vec<ImagePair>> {
        self.entries(split)
            .map(|e| read_pair(&base_dir.join(&e.path)))
            .collect()
    }
}

/// Fractions of pairs assigned to train / val / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    /// Largest-remainder apportionment of `n` items.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || f.iter().sum::<f64>() <= 0.0 {
            return Err(Error::spec("split", "fractions must be >= 0 with a positive sum"));
        }
        let total: f64 = f.iter().sum();
        let exact: Vec<f64> = f.iter().map(|v| v / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let mut rest: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, v)| (i, v - v.floor())).collect();
        rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut missing = n - counts.iter().sum::<usize>();
        for (i, _) in rest {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        Ok([counts[0], counts[1], counts[2]])
    }
}

/// SplitMix64 finalizer; used to derive independent per-pair seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates a single pair deterministically from `pair_seed`.
pub fn generate_pair(
    pair_seed: u64,
    spec_template: &PhantomSpec,
    degradation: &DegradationTemplate,
) -> Result<ImagePair> {
    let spec = PhantomSpec {
        seed: mix_seed(pair_seed, 1),
        ..spec_template.clone()
    };
    let phantom = generate_phantom(&spec)?;
    let mut rng = seeded_rng(mix_seed(pair_seed, 2));
    let field = degradation.field(spec.height, spec.width, &mut rng, mix_seed(pair_seed, 3));
    let source = degrade(&phantom.target, &field)?;
    Ok(ImagePair {
        pair_id: format!("p{:016x}", mix_seed(pair_seed, 4)),
        seed: pair_seed,
        source: source.mapv(|v| v as f32),
        target: phantom.target.mapv(|v| v as f32),
        body_mask: phantom.body_mask,
        lesion_mask: phantom.lesion_mask,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `n_pairs` pair files under `out_dir/pairs/` and `out_dir/manifest.json`.
pub fn build_dataset(
    n_pairs: usize,
    spec_template: &PhantomSpec,
    degradation: &DegradationTemplate,
    split: &SplitFractions,
    out_dir: &Path,
    seed: u64,
) -> Result<(Manifest, PathBuf)> {
    if n_pairs == 0 {
        return Err(Error::spec("n_pairs", "must be >= 1"));
    }
    spec_template.validate()?;
    let counts = split.counts(n_pairs)?;
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut seeded_rng(mix_seed(seed, 0xA551_6E)));
    let mut assignment = vec![Split::Train; n_pairs];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    let pairs_dir = out_dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
    let mut entries = Vec::with_capacity(n_pairs);
    for (i, split) in assignment.into_iter().enumerate() {
        let pair_seed = mix_seed(seed, i as u64 + 1);
        let pair = generate_pair(pair_seed, spec_template, degradation)?;
        let rel = format!("pairs/{}.racmf", pair.pair_id);
        write_pair(&pair, &out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            pair_id: pair.pair_id,
            path: rel,
            split,
            seed: pair_seed,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        pairs: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    write_atomic(&path, &manifest.to_bytes())?;
    Ok((manifest, path))
}
