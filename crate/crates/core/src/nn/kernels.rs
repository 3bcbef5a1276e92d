//! Dense kernels shared by the forward, tangent and adjoint passes.
//!
//! Convolutions go through im2col + GEMM; everything else is a direct loop.

use super::Tensor;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover m×k, k×n and m×n with
    // the given strides; `c` is contiguous row-major m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, o) in out.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            x[base + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution. `w` is `[Cout, Cin, k, k]` with odd `k`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert!(k == k2 && k % 2 == 1, "conv2d expects odd square kernels");
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let mut col = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
    for ni in 0..n {
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        let os = &mut out.data_mut()[ni * cout * hw..(ni + 1) * cout * hw];
        if let Some(b) = b {
            for (co, chunk) in os.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, wd, k, &mut col);
            &col
        };
        gemm(cout, ckk, hw, w.data(), ckk as isize, 1, src, hw as isize, 1, beta, os);
    }
    out
}

/// Adjoint of [`conv2d`]. Accumulates into `gw`/`gb` and returns `gx` when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    want_gx: bool,
    gw: Option<&mut Tensor>,
    gb: Option<&mut Tensor>,
) -> Option<Tensor> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut gx = want_gx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![0.0; ckk * hw];
    let mut gcol = vec![0.0; ckk * hw];
    let mut gw = gw;
    if let Some(gb) = gb {
        for ni in 0..n {
            let gys = &gy.data()[ni * cout * hw..(ni + 1) * cout * hw];
            for (co, chunk) in gys.chunks(hw).enumerate() {
                gb.data_mut()[co] += chunk.iter().sum::<f64>();
            }
        }
    }
    for ni in 0..n {
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        let gys = &gy.data()[ni * cout * hw..(ni + 1) * cout * hw];
        if let Some(gw) = gw.as_deref_mut() {
            let src: &[f64] = if k == 1 {
                xs
            } else {
                im2col(xs, cin, h, wd, k, &mut col);
                &col
            };
            gemm(cout, hw, ckk, gys, hw as isize, 1, src, 1, hw as isize, 1.0, gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx.data_mut()[ni * cin * hw..(ni + 1) * cin * hw];
            if k == 1 {
                gemm(cin, cout, hw, w.data(), 1, ckk as isize, gys, hw as isize, 1, 0.0, gxs);
            } else {
                gemm(ckk, cout, hw, w.data(), 1, ckk as isize, gys, hw as isize, 1, 0.0, &mut gcol);
                col2im_add(&gcol, cin, h, wd, k, gxs);
            }
        }
    }
    gx
}

/// `y = x W^T + b` for `x: [N, in]`, `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, din) = x.dims2();
    let (dout, win) = w.dims2();
    assert_eq!(din, win, "linear input width mismatch");
    let mut y = Tensor::zeros(&[n, dout]);
    if let Some(b) = b {
        for row in y.data_mut().chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(n, din, dout, x.data(), din as isize, 1, w.data(), 1, din as isize, beta, y.data_mut());
    y
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    want_gx: bool,
    gw: Option<&mut Tensor>,
    gb: Option<&mut Tensor>,
) -> Option<Tensor> {
    let (n, din) = x.dims2();
    let (dout, _) = w.dims2();
    if let Some(gw) = gw {
        gemm(dout, n, din, gy.data(), 1, dout as isize, x.data(), din as isize, 1, 1.0, gw.data_mut());
    }
    if let Some(gb) = gb {
        for row in gy.data().chunks(dout) {
            for (g, r) in gb.data_mut().iter_mut().zip(row) {
                *g += r;
            }
        }
    }
    want_gx.then(|| {
        let mut gx = Tensor::zeros(&[n, din]);
        gemm(n, dout, din, gy.data(), dout as isize, 1, w.data(), din as isize, 1, 0.0, gx.data_mut());
        gx
    })
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Derivative of SiLU evaluated at `x`, multiplied into `g`.
pub fn silu_grad(x: &Tensor, g: &Tensor) -> Tensor {
    x.zip_map(g, |v, gv| {
        let s = sigmoid(v);
        gv * s * (1.0 + v * (1.0 - s))
    })
}

/// Per-channel modulation `x * (1 + scale) + shift`, `scale`/`shift` are `[N, C]`.
pub fn film(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let s = 1.0 + scale.data()[ni * c + ci];
            let b = shift.data()[ni * c + ci];
            let off = (ni * c + ci) * hw;
            for v in &mut y.data_mut()[off..off + hw] {
                *v = *v * s + b;
            }
        }
    }
    y
}

/// Tangent of [`film`]: `dx (1 + s) + x ds + db`. `None` inputs are zero.
pub fn film_tangent(
    x: &Tensor,
    dx: Option<&Tensor>,
    scale: &Tensor,
    dscale: Option<&Tensor>,
    dshift: Option<&Tensor>,
) -> Option<Tensor> {
    if dx.is_none() && dscale.is_none() && dshift.is_none() {
        return None;
    }
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let j = ni * c + ci;
            let s = 1.0 + scale.data()[j];
            let ds = dscale.map_or(0.0, |t| t.data()[j]);
            let db = dshift.map_or(0.0, |t| t.data()[j]);
            let off = j * hw;
            let xs = &x.data()[off..off + hw];
            let os = &mut out.data_mut()[off..off + hw];
            match dx {
                Some(dx) => {
                    let dxs = &dx.data()[off..off + hw];
                    for ((o, xv), dv) in os.iter_mut().zip(xs).zip(dxs) {
                        *o = dv * s + xv * ds + db;
                    }
                }
                None => {
                    for (o, xv) in os.iter_mut().zip(xs) {
                        *o = xv * ds + db;
                    }
                }
            }
        }
    }
    Some(out)
}

/// Returns `(gx, gscale, gshift)`.
pub fn film_backward(x: &Tensor, scale: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gs = Tensor::zeros(&[n, c]);
    let mut gb = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let s = 1.0 + scale.data()[ni * c + ci];
            let off = (ni * c + ci) * hw;
            let xs = &x.data()[off..off + hw];
            let gys = &gy.data()[off..off + hw];
            let (mut acc_s, mut acc_b) = (0.0, 0.0);
            for ((g, xv), out) in gys.iter().zip(xs).zip(&mut gx.data_mut()[off..off + hw]) {
                *out = g * s;
                acc_s += g * xv;
                acc_b += g;
            }
            gs.data_mut()[ni * c + ci] = acc_s;
            gb.data_mut()[ni * c + ci] = acc_b;
        }
    }
    (gx, gs, gb)
}

/// Block-average pooling with block side `k`; trailing partial blocks average
/// only the pixels they contain.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for plane in 0..n * c {
        let xs = &x.data()[plane * h * w..(plane + 1) * h * w];
        let ys = &mut y.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for by in 0..oh {
            let y1 = ((by + 1) * k).min(h);
            for bx in 0..ow {
                let x1 = ((bx + 1) * k).min(w);
                let mut acc = 0.0;
                for yy in by * k..y1 {
                    acc += xs[yy * w + bx * k..yy * w + x1].iter().sum::<f64>();
                }
                ys[by * ow + bx] = acc / ((y1 - by * k) * (x1 - bx * k)) as f64;
            }
        }
    }
    y
}

pub fn avg_pool_backward(x_shape: &[usize], k: usize, gy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let mut gx = Tensor::zeros(x_shape);
    for plane in 0..n * c {
        let gys = &gy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let gxs = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for yy in 0..h {
            let by = yy / k;
            let bh = ((by + 1) * k).min(h) - by * k;
            for xx in 0..w {
                let bx = xx / k;
                let bw = ((bx + 1) * k).min(w) - bx * k;
                gxs[yy * w + xx] = gys[by * ow + bx] / (bh * bw) as f64;
            }
        }
    }
    gx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for plane in 0..n * c {
        let xs = &x.data()[plane * h * w..(plane + 1) * h * w];
        let ys = &mut y.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                ys[yy * ow + xx] = xs[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    let (n, c, oh, ow) = gy.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let gys = &gy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let gxs = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for yy in 0..oh {
            for xx in 0..ow {
                gxs[(yy / 2) * w + xx / 2] += gys[yy * ow + xx];
            }
        }
    }
    gx
}

/// Channel concatenation of two `[N, C, H, W]` tensors.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert!(n == nb && h == hb && w == wb, "concat spatial mismatch");
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

pub fn concat_backward(gy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = gy.dims4();
    let cb = c - ca;
    let hw = h * w;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for ni in 0..n {
        let base = ni * c * hw;
        ga.extend_from_slice(&gy.data()[base..base + ca * hw]);
        gb.extend_from_slice(&gy.data()[base + ca * hw..base + c * hw]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], ga),
        Tensor::from_vec(&[n, cb, h, w], gb),
    )
}

/// Spatial mean `[N, C, H, W] -> [N, C]`.
pub fn mean_hw(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    Tensor::from_vec(
        &[n, c],
        x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect(),
    )
}

pub fn mean_hw_backward(x_shape: &[usize], gy: &Tensor) -> Tensor {
    let hw = x_shape[2] * x_shape[3];
    let mut gx = Tensor::zeros(x_shape);
    for (plane, g) in gx.data_mut().chunks_mut(hw).zip(gy.data()) {
        plane.fill(g / hw as f64);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution used as the reference for the GEMM path.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let p = (k / 2) as isize;
        let mut y = Tensor::zeros(&[n, cout, h, wd]);
        for ni in 0..n {
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[((ni * cin + ci) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        y.data_mut()[((ni * cout + co) * h + yy) * wd + xx] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1, 3] {
            let x = pseudo(&[2, 3, 5, 6], 1);
            let w = pseudo(&[4, 3, k, k], 2);
            let b = pseudo(&[4], 3);
            let fast = conv2d(&x, &w, Some(&b));
            let slow = conv_naive(&x, &w, &b);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> must equal <x, conv^T(g)> and <w, dW(g)>.
        for k in [1, 3] {
            let x = pseudo(&[2, 3, 5, 4], 4);
            let w = pseudo(&[2, 3, k, k], 5);
            let g = pseudo(&[2, 2, 5, 4], 6);
            let y = conv2d(&x, &w, None);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let mut gw = Tensor::zeros(w.shape());
            let gx = conv2d_backward(&x, &w, &g, true, Some(&mut gw), None).unwrap();
            let via_x: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = gw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
        }
    }

    #[test]
    fn partial_pooling_averages_available_pixels() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let y = avg_pool(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.0, 4.5, 7.5, 9.0]);
        let g = avg_pool_backward(x.shape(), 2, &Tensor::full(&[1, 1, 2, 2], 1.0));
        assert!((g.sum() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_is_adjoint() {
        let x = pseudo(&[3, 5], 7);
        let w = pseudo(&[4, 5], 8);
        let g = pseudo(&[3, 4], 9);
        let y = linear(&x, &w, None);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let mut gw = Tensor::zeros(w.shape());
        let gx = linear_backward(&x, &w, &g, true, Some(&mut gw), None).unwrap();
        let via_x: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = gw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-12);
        assert!((lhs - via_w).abs() < 1e-12);
    }
}
