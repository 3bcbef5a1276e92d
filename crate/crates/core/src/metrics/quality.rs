use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

/// Reported value when the two images are identical.
pub const PSNR_CAP_DB: f64 = 60.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Dynamic range of images normalized to `[-1, 1]`.
pub const SIGNED_RANGE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when MSE was zero and `db` is the cap.
    pub exact: bool,
}

fn check_mask(mask: &Array2<f64>, dim: (usize, usize)) -> Result<f64> {
    if mask.dim() != dim {
        return Err(Error::Dimension(format!("mask {:?} vs image {:?}", mask.dim(), dim)));
    }
    let n = mask.iter().filter(|&&m| m > 0.0).count();
    if n == 0 {
        return Err(Error::Precondition("mask selects no pixels".into()));
    }
    Ok(n as f64)
}

pub fn mse(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    ensure_same_shape("mse", x.shape(), y.shape())?;
    if x.is_empty() {
        return Err(Error::Precondition("empty images".into()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// Mean squared error over pixels where `mask > 0`.
pub fn masked_mse(x: &Array2<f64>, y: &Array2<f64>, mask: &Array2<f64>) -> Result<f64> {
    ensure_same_shape("mse", x.shape(), y.shape())?;
    let n = check_mask(mask, x.dim())?;
    let mut s = 0.0;
    for ((a, b), &m) in x.iter().zip(y).zip(mask) {
        if m > 0.0 {
            s += (a - b).powi(2);
        }
    }
    Ok(s / n)
}

/// `10 log10(MAX² / MSE)`; a zero MSE reports [`PSNR_CAP_DB`] with `exact` set.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> Result<Psnr> {
    if !(max_value > 0.0) {
        return Err(Error::Precondition(format!("max_value must be > 0, got {max_value}")));
    }
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, exact: true });
    }
    let db = 10.0 * (max_value * max_value / mse).log10();
    Ok(Psnr { db, exact: false })
}

pub fn psnr(x: &Array2<f64>, y: &Array2<f64>, max_value: f64) -> Result<Psnr> {
    psnr_from_mse(mse(x, y)?, max_value)
}

pub fn masked_psnr(x: &Array2<f64>, y: &Array2<f64>, mask: &Array2<f64>, max_value: f64) -> Result<Psnr> {
    psnr_from_mse(masked_mse(x, y, mask)?, max_value)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian-weighted local mean; the window is truncated at the
/// border and renormalized over the pixels it still covers.
fn local_mean(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (g.len() / 2) as isize;
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &gk) in g.iter().enumerate() {
                let d = k as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, x as isize + d)
                } else {
                    (y as isize + d, x as isize)
                };
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += gk * src[[yy as usize, xx as usize]];
                    norm += gk;
                }
            }
            acc / norm
        })
    };
    let tmp = pass(img, true);
    pass(&tmp, false)
}

/// Local SSIM at every pixel for images on `[0, L]`.
pub fn ssim_map(x: &Array2<f64>, y: &Array2<f64>, data_range: f64) -> Result<Array2<f64>> {
    ensure_same_shape("ssim", x.shape(), y.shape())?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::Precondition("data range must be > 0".into()));
    }
    let g = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mx = local_mean(x, &g);
    let my = local_mean(y, &g);
    let mxx = local_mean(&(x * x), &g);
    let myy = local_mean(&(y * y), &g);
    let mxy = local_mean(&(x * y), &g);
    Ok(Array2::from_shape_fn((h, w), |p| {
        let (ux, uy) = (mx[p], my[p]);
        let vx = (mxx[p] - ux * ux).max(0.0);
        let vy = (myy[p] - uy * uy).max(0.0);
        let cxy = mxy[p] - ux * uy;
        ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    }))
}

pub fn ssim(x: &Array2<f64>, y: &Array2<f64>, data_range: f64) -> Result<f64> {
    let m = ssim_map(x, y, data_range)?;
    Ok(m.mean().expect("nonempty"))
}

/// SSIM map averaged over `mask > 0`.
pub fn masked_ssim(x: &Array2<f64>, y: &Array2<f64>, mask: &Array2<f64>, data_range: f64) -> Result<f64> {
    let m = ssim_map(x, y, data_range)?;
    let n = check_mask(mask, m.dim())?;
    Ok(m.iter().zip(mask).filter(|(_, &k)| k > 0.0).map(|(v, _)| v).sum::<f64>() / n)
}

/// Shifts `[-1, 1]` images to `[0, 2]` so SSIM constants see a nonnegative range.
pub fn shift_signed(x: &Array2<f64>) -> Array2<f64> {
    x + 1.0
}

/// Mean squared Sobel gradient magnitude over `mask > 0` (edge-replicated border).
pub fn focus_measure(x: &Array2<f64>, mask: &Array2<f64>) -> Result<f64> {
    let n = check_mask(mask, x.dim())?;
    let (h, w) = x.dim();
    let at = |y: isize, xx: isize| x[[y.clamp(0, h as isize - 1) as usize, xx.clamp(0, w as isize - 1) as usize]];
    let mut s = 0.0;
    for ((y, xx), &m) in mask.indexed_iter() {
        if m <= 0.0 {
            continue;
        }
        let (y, xx) = (y as isize, xx as isize);
        let gx = (at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1))
            - (at(y - 1, xx - 1) + 2.0 * at(y, xx - 1) + at(y + 1, xx - 1));
        let gy = (at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1))
            - (at(y - 1, xx - 1) + 2.0 * at(y - 1, xx) + at(y - 1, xx + 1));
        s += gx * gx + gy * gy;
    }
    Ok(s / n)
}

/// Concordance correlation coefficient in covariance form with population
/// moments. Two identical constant series give 1.
pub fn ccc(s: &[f64], t: &[f64]) -> Result<f64> {
    if s.len() != t.len() {
        return Err(Error::Dimension(format!("series lengths {} and {}", s.len(), t.len())));
    }
    if s.len() < 2 {
        return Err(Error::Precondition(format!("CCC needs >= 2 values, got {}", s.len())));
    }
    let n = s.len() as f64;
    let ms = s.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let vs = s.iter().map(|v| (v - ms).powi(2)).sum::<f64>() / n;
    let vt = t.iter().map(|v| (v - mt).powi(2)).sum::<f64>() / n;
    let cov = s.iter().zip(t).map(|(a, b)| (a - ms) * (b - mt)).sum::<f64>() / n;
    let denom = vs + vt + (ms - mt).powi(2);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * cov / denom).clamp(-1.0, 1.0))
}
