//! Noise power spectrum of homogeneous patches.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_PATCH_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpsProfile {
    /// Patch-averaged `|DFT|² / n`, DC at index (0, 0).
    #[serde(skip)]
    pub spectrum: Array2<f64>,
    /// Radial bin centres in cycles per pixel.
    pub bin_centers: Vec<f64>,
    pub power: Vec<f64>,
    pub n_patches: usize,
}

/// Signed integer frequency index of DFT bin `k` for length `n`.
fn freq_index(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn fft2(patch: &Array2<f64>, planner: &mut FftPlanner<f64>) -> Array2<Complex<f64>> {
    let side = patch.nrows();
    let fft = planner.plan_fft_forward(side);
    let mut data = patch.mapv(|v| Complex::new(v, 0.0));
    for mut row in data.rows_mut() {
        let mut buf: Vec<_> = row.to_vec();
        fft.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    for mut col in data.columns_mut() {
        let mut buf: Vec<_> = col.to_vec();
        fft.process(&mut buf);
        col.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    data
}

pub fn nps(patches: &[Array2<f64>]) -> Result<NpsProfile> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Precondition("NPS needs at least one patch".into()))?;
    let side = first.nrows();
    if first.ncols() != side || side < MIN_PATCH_SIDE {
        return Err(Error::Precondition(format!(
            "NPS patches must be square with side >= {MIN_PATCH_SIDE}, got {:?}",
            first.dim()
        )));
    }
    if let Some(p) = patches.iter().find(|p| p.dim() != first.dim()) {
        return Err(Error::Precondition(format!(
            "NPS patches differ in size: {:?} vs {:?}",
            first.dim(),
            p.dim()
        )));
    }
    let n = (side * side) as f64;
    let mut planner = FftPlanner::new();
    let mut spectrum = Array2::<f64>::zeros((side, side));
    for p in patches {
        let mean = p.mean().unwrap_or(0.0);
        let f = fft2(&(p - mean), &mut planner);
        spectrum.zip_mut_with(&f, |s, c| *s += c.norm_sqr() / n);
    }
    spectrum.mapv_inplace(|v| v / patches.len() as f64);

    let n_bins = side / 2;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for ((ky, kx), &v) in spectrum.indexed_iter() {
        let r = freq_index(ky, side).hypot(freq_index(kx, side));
        let b = r.floor() as usize;
        if b < n_bins {
            sums[b] += v;
            counts[b] += 1;
        }
    }
    let power = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let bin_centers = (0..n_bins).map(|b| (b as f64 + 0.5) / side as f64).collect();
    Ok(NpsProfile {
        spectrum,
        bin_centers,
        power,
        n_patches: patches.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_patch_has_zero_spectrum() {
        let p = nps(&[Array2::from_elem((8, 8), 0.3)]).unwrap();
        assert!(p.spectrum.iter().all(|&v| v.abs() < 1e-28));
        assert_eq!(p.power.len(), 4);
        assert_eq!(p.bin_centers[0], 1.0 / 16.0);
    }

    #[test]
    fn impulse_spectrum_is_flat_off_dc() {
        let mut patch = Array2::zeros((8, 8));
        patch[[3, 5]] = 1.0;
        let p = nps(&[patch]).unwrap();
        // DFT of (delta − 1/64) is 0 at DC and a unit-modulus phase elsewhere.
        assert!(p.spectrum[[0, 0]].abs() < 1e-15);
        for ((y, x), &v) in p.spectrum.indexed_iter() {
            if (y, x) != (0, 0) {
                assert!((v - 1.0 / 64.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parseval_exact() {
        let mut rng = seeded_rng(1);
        let patches: Vec<_> = (0..3)
            .map(|_| Array2::from_shape_fn((16, 16), |_| Distribution::<f64>::sample(&StandardNormal, &mut rng)))
            .collect();
        let p = nps(&patches).unwrap();
        let var = patches
            .iter()
            .map(|q| {
                let m = q.mean().unwrap();
                q.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 256.0
            })
            .sum::<f64>()
            / 3.0;
        assert!((p.spectrum.mean().unwrap() - var).abs() < 1e-6 * var.max(1.0));
    }

    #[test]
    fn white_noise_matches_variance() {
        let mut rng = seeded_rng(2);
        let patches: Vec<_> = (0..60)
            .map(|_| Array2::from_shape_fn((64, 64), |_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng)))
            .collect();
        let p = nps(&patches).unwrap();
        let rel = (p.spectrum.sum() / 4096.0 - 0.01).abs() / 0.01;
        assert!(rel < 0.1, "relative error {rel}");
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(nps(&[]), Err(Error::Precondition(_))));
        assert!(matches!(nps(&[Array2::zeros((4, 4))]), Err(Error::Precondition(_))));
        assert!(matches!(
            nps(&[Array2::zeros((8, 8)), Array2::zeros((10, 10))]),
            Err(Error::Precondition(_))
        ));
    }
}
