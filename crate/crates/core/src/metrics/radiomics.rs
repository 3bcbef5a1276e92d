//! Fixed 24-feature radiomic catalog on 2-D regions of interest.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::quality::ccc;

/// Gray levels used by [`feature_vector`].
pub const DEFAULT_LEVELS: usize = 32;

/// Guard added to the NGTDM coarseness denominator.
pub const COARSENESS_EPS: f64 = 1e-8;

pub const FAMILIES: [&str; 6] = ["first_order", "glcm", "glrlm", "glszm", "gldm", "ngtdm"];

/// Catalog order of all features as `family.name`.
pub const CATALOG: [&str; 24] = [
    "first_order.mean",
    "first_order.variance",
    "first_order.skewness",
    "first_order.kurtosis",
    "first_order.energy",
    "first_order.entropy",
    "glcm.contrast",
    "glcm.correlation",
    "glcm.energy",
    "glcm.homogeneity",
    "glrlm.short_run_emphasis",
    "glrlm.long_run_emphasis",
    "glrlm.gray_level_nonuniformity",
    "glrlm.run_length_nonuniformity",
    "glrlm.run_percentage",
    "glszm.small_zone_emphasis",
    "glszm.large_zone_emphasis",
    "glszm.zone_percentage",
    "gldm.small_dependence_emphasis",
    "gldm.large_dependence_emphasis",
    "gldm.dependence_nonuniformity",
    "ngtdm.coarseness",
    "ngtdm.contrast",
    "ngtdm.busyness",
];

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Gray-level indices `1..=n_levels` inside the ROI, 0 outside.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedRoi {
    pub levels: Array2<usize>,
    pub n_levels: usize,
    pub min: f64,
    pub max: f64,
}

impl QuantizedRoi {
    fn in_roi(&self, y: isize, x: isize) -> Option<usize> {
        let (h, w) = self.levels.dim();
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            return None;
        }
        match self.levels[[y as usize, x as usize]] {
            0 => None,
            l => Some(l),
        }
    }

    fn pixels(&self) -> impl Iterator<Item = ((usize, usize), usize)> + '_ {
        self.levels.indexed_iter().filter(|(_, &l)| l > 0).map(|(p, &l)| (p, l))
    }

    pub fn n_pixels(&self) -> usize {
        self.levels.iter().filter(|&&l| l > 0).count()
    }
}

fn roi_values(image: &Array2<f64>, roi: &Array2<bool>) -> Result<Vec<f64>> {
    if image.dim() != roi.dim() {
        return Err(Error::Dimension(format!("image {:?} vs ROI {:?}", image.dim(), roi.dim())));
    }
    let vals: Vec<f64> = image.iter().zip(roi).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    if vals.is_empty() {
        return Err(Error::Precondition("ROI is empty".into()));
    }
    Ok(vals)
}

/// Fixed-bin-count quantization over the in-ROI `[min, max]`; the top bin is
/// closed on the right and a constant ROI maps to level 1.
pub fn quantize_roi(image: &Array2<f64>, roi: &Array2<bool>, n_levels: usize) -> Result<QuantizedRoi> {
    if n_levels < 2 {
        return Err(Error::Precondition(format!("need >= 2 gray levels, got {n_levels}")));
    }
    let vals = roi_values(image, roi)?;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let levels = Array2::from_shape_fn(image.dim(), |p| {
        if !roi[p] {
            0
        } else if range == 0.0 {
            1
        } else {
            let l = ((image[p] - min) / range * n_levels as f64).floor() as usize + 1;
            l.min(n_levels)
        }
    });
    Ok(QuantizedRoi {
        levels,
        n_levels,
        min,
        max,
    })
}

/// Mean, variance, skewness, kurtosis (excess), energy and entropy (bits over
/// the quantized levels of `q`).
pub fn first_order_features(image: &Array2<f64>, roi: &Array2<bool>, q: &QuantizedRoi) -> Result<[f64; 6]> {
    let vals = roi_values(image, roi)?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = vals.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let (skew, kurt) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let energy = vals.iter().map(|v| v * v).sum::<f64>();
    let mut hist = vec![0usize; q.n_levels + 1];
    for (_, l) in q.pixels() {
        hist[l] += 1;
    }
    let total = q.n_pixels() as f64;
    let entropy = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok([mean, m2, skew, kurt, energy, entropy])
}

pub const GLCM_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// Contrast, correlation, energy and homogeneity of the offset-averaged,
/// symmetric, normalized co-occurrence matrix.
pub fn glcm_features(q: &QuantizedRoi) -> Result<[f64; 4]> {
    let ng = q.n_levels;
    let mut avg = vec![0.0; ng * ng];
    let mut used = 0;
    for (dy, dx) in GLCM_OFFSETS {
        let mut m = vec![0.0; ng * ng];
        let mut total = 0.0;
        for ((y, x), i) in q.pixels() {
            if let Some(j) = q.in_roi(y as isize + dy, x as isize + dx) {
                m[(i - 1) * ng + (j - 1)] += 1.0;
                m[(j - 1) * ng + (i - 1)] += 1.0;
                total += 2.0;
            }
        }
        if total > 0.0 {
            used += 1;
            for (a, v) in avg.iter_mut().zip(&m) {
                *a += v / total;
            }
        }
    }
    if used == 0 {
        return Err(Error::FeatureUndefined("glcm: ROI has no neighbouring pixel pairs".into()));
    }
    avg.iter_mut().for_each(|v| *v /= used as f64);
    let at = |i: usize, j: usize| avg[i * ng + j];
    let mut mu = 0.0;
    for i in 0..ng {
        for j in 0..ng {
            mu += (i + 1) as f64 * at(i, j);
        }
    }
    let (mut contrast, mut var, mut cov, mut energy, mut homog) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..ng {
        for j in 0..ng {
            let p = at(i, j);
            let (fi, fj) = ((i + 1) as f64, (j + 1) as f64);
            contrast += (fi - fj).powi(2) * p;
            var += (fi - mu).powi(2) * p;
            cov += (fi - mu) * (fj - mu) * p;
            energy += p * p;
            homog += p / (1.0 + (fi - fj).powi(2));
        }
    }
    // Symmetric matrix: both marginals share mean and variance.
    let correlation = if var > 0.0 { cov / var } else { 1.0 };
    Ok([contrast, correlation, energy, homog])
}

pub const RUN_DIRECTIONS: [(isize, isize); 4] = [(0, 1), (-1, 1), (1, 0), (1, 1)];

/// Short/long run emphasis, gray-level and run-length nonuniformity and run
/// percentage, each averaged over the four directions.
pub fn glrlm_features(q: &QuantizedRoi) -> Result<[f64; 5]> {
    let np = q.n_pixels();
    if np == 0 {
        return Err(Error::Precondition("glrlm: ROI is empty".into()));
    }
    let (h, w) = q.levels.dim();
    let max_len = h.max(w);
    let mut acc = [0.0; 5];
    for (dy, dx) in RUN_DIRECTIONS {
        // counts[level-1][len-1]
        let mut counts = vec![vec![0.0; max_len]; q.n_levels];
        for ((y, x), l) in q.pixels() {
            // Start of a run: predecessor is outside the ROI or differs.
            if q.in_roi(y as isize - dy, x as isize - dx) == Some(l) {
                continue;
            }
            let mut len = 1;
            while q.in_roi(y as isize + dy * len as isize, x as isize + dx * len as isize) == Some(l) {
                len += 1;
            }
            counts[l - 1][len - 1] += 1.0;
        }
        let nr: f64 = counts.iter().flatten().sum();
        let mut sre = 0.0;
        let mut lre = 0.0;
        let mut rln_cols = vec![0.0; max_len];
        let mut gln = 0.0;
        for row in &counts {
            let row_sum: f64 = row.iter().sum();
            gln += row_sum * row_sum;
            for (li, &c) in row.iter().enumerate() {
                let len = (li + 1) as f64;
                sre += c / (len * len);
                lre += c * len * len;
                rln_cols[li] += c;
            }
        }
        let rln: f64 = rln_cols.iter().map(|c| c * c).sum();
        acc[0] += sre / nr;
        acc[1] += lre / nr;
        acc[2] += gln / nr;
        acc[3] += rln / nr;
        acc[4] += nr / np as f64;
    }
    Ok(acc.map(|v| v / RUN_DIRECTIONS.len() as f64))
}

/// Sizes of 8-connected same-level zones, in discovery (row-major) order.
pub fn zone_sizes(q: &QuantizedRoi) -> Vec<(usize, usize)> {
    let (h, w) = q.levels.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut zones = Vec::new();
    for ((y, x), l) in q.pixels() {
        if seen[[y, x]] {
            continue;
        }
        seen[[y, x]] = true;
        let mut stack = vec![(y, x)];
        let mut size = 0;
        while let Some((cy, cx)) = stack.pop() {
            size += 1;
            for (dy, dx) in NEIGHBORS8 {
                let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                if q.in_roi(ny, nx) == Some(l) && !seen[[ny as usize, nx as usize]] {
                    seen[[ny as usize, nx as usize]] = true;
                    stack.push((ny as usize, nx as usize));
                }
            }
        }
        zones.push((l, size));
    }
    zones
}

/// Small/large zone emphasis and zone percentage.
pub fn glszm_features(q: &QuantizedRoi) -> Result<[f64; 3]> {
    let np = q.n_pixels();
    if np == 0 {
        return Err(Error::Precondition("glszm: ROI is empty".into()));
    }
    let zones = zone_sizes(q);
    let nz = zones.len() as f64;
    let sze = zones.iter().map(|&(_, s)| 1.0 / (s * s) as f64).sum::<f64>() / nz;
    let lze = zones.iter().map(|&(_, s)| (s * s) as f64).sum::<f64>() / nz;
    Ok([sze, lze, nz / np as f64])
}

/// Small/large dependence emphasis and dependence nonuniformity, with a
/// dependence of one plus the number of equal-level in-ROI 8-neighbours.
pub fn gldm_features(q: &QuantizedRoi) -> Result<[f64; 3]> {
    let np = q.n_pixels();
    if np == 0 {
        return Err(Error::Precondition("gldm: ROI is empty".into()));
    }
    let mut by_dep = [0.0f64; 10];
    for ((y, x), l) in q.pixels() {
        let d = 1 + NEIGHBORS8
            .iter()
            .filter(|(dy, dx)| q.in_roi(y as isize + dy, x as isize + dx) == Some(l))
            .count();
        by_dep[d] += 1.0;
    }
    let n = np as f64;
    let mut sde = 0.0;
    let mut lde = 0.0;
    let mut dn = 0.0;
    for (d, &c) in by_dep.iter().enumerate().skip(1) {
        let df = d as f64;
        sde += c / (df * df);
        lde += c * df * df;
        dn += c * c;
    }
    Ok([sde / n, lde / n, dn / n])
}

/// Coarseness, contrast and busyness from neighbourhood gray-tone differences.
pub fn ngtdm_features(q: &QuantizedRoi) -> Result<[f64; 3]> {
    let ng = q.n_levels;
    let mut s = vec![0.0; ng + 1];
    let mut n = vec![0.0; ng + 1];
    for ((y, x), l) in q.pixels() {
        let (mut sum, mut cnt) = (0.0, 0usize);
        for (dy, dx) in NEIGHBORS8 {
            if let Some(j) = q.in_roi(y as isize + dy, x as isize + dx) {
                sum += j as f64;
                cnt += 1;
            }
        }
        if cnt == 0 {
            continue;
        }
        s[l] += (l as f64 - sum / cnt as f64).abs();
        n[l] += 1.0;
    }
    let nvp: f64 = n.iter().sum();
    if nvp == 0.0 {
        return Err(Error::FeatureUndefined("ngtdm: no pixel has an in-ROI neighbour".into()));
    }
    let p: Vec<f64> = n.iter().map(|c| c / nvp).collect();
    let present: Vec<usize> = (1..=ng).filter(|&i| p[i] > 0.0).collect();
    let ps_sum: f64 = present.iter().map(|&i| p[i] * s[i]).sum();
    let coarseness = 1.0 / (ps_sum + COARSENESS_EPS);
    let ngp = present.len() as f64;
    let contrast = if present.len() > 1 {
        let mut pair = 0.0;
        for &i in &present {
            for &j in &present {
                pair += p[i] * p[j] * (i as f64 - j as f64).powi(2);
            }
        }
        pair / (ngp * (ngp - 1.0)) * s.iter().sum::<f64>() / nvp
    } else {
        0.0
    };
    let mut denom = 0.0;
    for &i in &present {
        for &j in &present {
            denom += (i as f64 * p[i] - j as f64 * p[j]).abs();
        }
    }
    let busyness = if denom > 0.0 { ps_sum / denom } else { 0.0 };
    Ok([coarseness, contrast, busyness])
}

/// Named features in [`CATALOG`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        CATALOG.iter().position(|&n| n == name).map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        CATALOG.iter().copied().zip(self.values.iter().copied())
    }
}

fn annotate<T>(family: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::FeatureUndefined(m) => Error::FeatureUndefined(format!("{family}: {m}")),
        Error::Precondition(m) => Error::Precondition(format!("{family}: {m}")),
        other => other,
    })
}

/// Quantizes the ROI to `n_levels` and evaluates all six families.
pub fn feature_vector(image: &Array2<f64>, roi: &Array2<bool>, n_levels: usize) -> Result<FeatureVector> {
    let q = quantize_roi(image, roi, n_levels)?;
    let mut values = Vec::with_capacity(CATALOG.len());
    values.extend(annotate("first_order", first_order_features(image, roi, &q))?);
    values.extend(annotate("glcm", glcm_features(&q))?);
    values.extend(annotate("glrlm", glrlm_features(&q))?);
    values.extend(annotate("glszm", glszm_features(&q))?);
    values.extend(annotate("gldm", gldm_features(&q))?);
    values.extend(annotate("ngtdm", ngtdm_features(&q))?);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("feature {} is not finite", CATALOG[i])));
    }
    Ok(FeatureVector { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCcc {
    pub feature: String,
    pub ccc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCcc {
    pub family: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CccReport {
    pub per_feature: Vec<FeatureCcc>,
    pub per_family: Vec<FamilyCcc>,
    pub overall: f64,
}

/// Feature-wise CCC across two cohorts, with family and overall means.
pub fn ccc_report(reference: &[FeatureVector], test: &[FeatureVector]) -> Result<CccReport> {
    if reference.len() != test.len() {
        return Err(Error::Contract(format!(
            "cohort sizes differ: {} vs {}",
            reference.len(),
            test.len()
        )));
    }
    if reference.len() < 2 {
        return Err(Error::Precondition("CCC report needs >= 2 cases".into()));
    }
    if reference.iter().chain(test).any(|v| v.values.len() != CATALOG.len()) {
        return Err(Error::Contract("feature vectors do not follow the catalog".into()));
    }
    let mut per_feature = Vec::with_capacity(CATALOG.len());
    for (i, name) in CATALOG.iter().enumerate() {
        let s: Vec<f64> = reference.iter().map(|v| v.values[i]).collect();
        let t: Vec<f64> = test.iter().map(|v| v.values[i]).collect();
        per_feature.push(FeatureCcc {
            feature: name.to_string(),
            ccc: ccc(&s, &t)?,
        });
    }
    let mut groups: HashMap<&str, Vec<f64>> = HashMap::new();
    for f in &per_feature {
        let fam = f.feature.split('.').next().unwrap();
        groups.entry(fam).or_default().push(f.ccc);
    }
    let per_family = FAMILIES
        .iter()
        .map(|fam| {
            let v = &groups[fam];
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            FamilyCcc {
                family: fam.to_string(),
                mean,
                std,
            }
        })
        .collect();
    let overall = per_feature.iter().map(|f| f.ccc).sum::<f64>() / per_feature.len() as f64;
    Ok(CccReport {
        per_feature,
        per_family,
        overall,
    })
}
