//! Minimal line plot of radial NPS profiles.

use image::{Rgb, RgbImage};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: i64 = 32;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws each `(colour, profile)` against `x` on shared linear axes.
pub fn render_profiles(x: &[f64], series: &[([u8; 3], &[f64])]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);
    if x.len() < 2 {
        return img;
    }
    let (x_lo, x_hi) = (x[0], x[x.len() - 1]);
    let y_hi = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let to_px = |xv: f64, yv: f64| {
        let px = MARGIN + ((xv - x_lo) / (x_hi - x_lo) * (w - 2 * MARGIN) as f64).round() as i64;
        let py = h - MARGIN - ((yv / y_hi) * (h - 2 * MARGIN) as f64).round() as i64;
        (px, py)
    };
    for (colour, s) in series {
        let pts: Vec<_> = x.iter().zip(s.iter()).map(|(&a, &b)| to_px(a, b)).collect();
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], Rgb(*colour));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_axes_and_series() {
        let x = [0.1, 0.2, 0.3];
        let img = render_profiles(&x, &[([255, 0, 0], &[1.0, 0.5, 0.0])]);
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        assert!(img.pixels().any(|p| *p == Rgb([255, 0, 0])));
        assert_eq!(*img.get_pixel(MARGIN as u32, (HEIGHT as i64 - MARGIN) as u32), Rgb([0, 0, 0]));
    }
}
