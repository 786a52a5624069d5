//! Raw numeric kernels used by the graph ops. All buffers are row-major.

/// Geometry of a (possibly temporal) convolution over a single sample.
///
/// Two-dimensional convolutions use `t = kt = 1` and `pad_t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kt: usize,
    pub k: usize,
    pub pad_t: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_t(&self) -> usize {
        self.t + 2 * self.pad_t + 1 - self.kt
    }
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    pub fn out_len(&self) -> usize {
        self.out_t() * self.out_h() * self.out_w()
    }
    /// Rows of the unfolded column matrix.
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kt * self.k * self.k
    }
}

/// Unfold `x` (`c_in × t × h × w`) into a `(c_in·kt·k·k) × (to·ho·wo)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (to, ho, wo) = (g.out_t(), g.out_h(), g.out_w());
    let q = to * ho * wo;
    let mut col = vec![0.0; g.col_rows() * q];
    let mut row = 0;
    for c in 0..g.c_in {
        for dt in 0..g.kt {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let dst = &mut col[row * q..(row + 1) * q];
                    for ot in 0..to {
                        let it = (ot + dt) as isize - g.pad_t as isize;
                        if it < 0 || it >= g.t as isize {
                            continue;
                        }
                        let plane = (c * g.t + it as usize) * g.h * g.w;
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src_row = plane + iy as usize * g.w;
                            let dst_row = (ot * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst[dst_row + ox] = x[src_row + ix as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into input layout.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (to, ho, wo) = (g.out_t(), g.out_h(), g.out_w());
    let q = to * ho * wo;
    let mut x = vec![0.0; g.c_in * g.t * g.h * g.w];
    let mut row = 0;
    for c in 0..g.c_in {
        for dt in 0..g.kt {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let src = &col[row * q..(row + 1) * q];
                    for ot in 0..to {
                        let it = (ot + dt) as isize - g.pad_t as isize;
                        if it < 0 || it >= g.t as isize {
                            continue;
                        }
                        let plane = (c * g.t + it as usize) * g.h * g.w;
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let dst_row = plane + iy as usize * g.w;
                            let src_row = (ot * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    x[dst_row + ix as usize] += src[src_row + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

fn dgemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), out: &mut [f64], rso: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            rso as isize,
            1,
        );
    }
}

/// `out (m×n) += a (m×k) · b (k×n)`.
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(m, k, n, a, (k, 1), b, (n, 1), out, n);
}

/// `out (m×k) += a (m×n) · bᵀ` where `b` is `k×n`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    dgemm(m, n, k, a, (n, 1), b, (1, n), out, k);
}

/// `out (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(k, m, n, a, (1, k), b, (n, 1), out, n);
}

/// Bilinear corner taps at fractional position `(y, x)` on an `h × w` plane.
/// Corners outside the plane are dropped, which is equivalent to zero padding.
/// Returns `(index, weight, d weight/dy, d weight/dx)` for each valid corner.
/// A non-finite position yields NaN weights so the failure propagates.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64, f64, f64); 4] {
    let mut taps = [(0usize, 0.0, 0.0, 0.0); 4];
    if !(y.is_finite() && x.is_finite()) {
        return [(0, f64::NAN, f64::NAN, f64::NAN); 4];
    }
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return taps;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
        (y0, x0 + 1, (1.0 - ly) * lx, -lx, 1.0 - ly),
        (y0 + 1, x0, ly * (1.0 - lx), 1.0 - lx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    for (slot, &(cy, cx, wt, dy, dx)) in taps.iter_mut().zip(&corners) {
        if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
            *slot = (cy as usize * w + cx as usize, wt, dy, dx);
        }
    }
    taps
}

/// Sampling positions for deformable convolution.
pub struct DeformGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub gamma: f64,
}

impl DeformGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn position(&self, offset: &[f64], j: usize, q: usize) -> (f64, f64) {
        let wo = self.out_w();
        let nq = self.out_h() * wo;
        let (oy, ox) = (q / wo, q % wo);
        let (ky, kx) = (j / self.k, j % self.k);
        let y = oy as f64 - self.pad as f64 + ky as f64 + self.gamma * offset[(2 * j) * nq + q];
        let x = ox as f64 - self.pad as f64 + kx as f64 + self.gamma * offset[(2 * j + 1) * nq + q];
        (y, x)
    }
}

/// Deformable unfold: columns sampled at the regular grid plus scaled offsets.
/// `offset` is `2·k·k × ho × wo` with `(dy, dx)` pairs per kernel tap.
pub fn deform_im2col(x: &[f64], offset: &[f64], g: &DeformGeom) -> Vec<f64> {
    let kk = g.k * g.k;
    let nq = g.out_h() * g.out_w();
    let plane = g.h * g.w;
    let mut col = vec![0.0; g.c_in * kk * nq];
    for j in 0..kk {
        for q in 0..nq {
            let (y, xx) = g.position(offset, j, q);
            let taps = bilinear_taps(y, xx, g.h, g.w);
            for c in 0..g.c_in {
                let src = &x[c * plane..(c + 1) * plane];
                let v: f64 = taps.iter().map(|&(idx, wt, _, _)| wt * src[idx]).sum();
                col[(c * kk + j) * nq + q] = v;
            }
        }
    }
    col
}

/// Adjoint of [`deform_im2col`] w.r.t. the input and the offsets.
pub fn deform_col2im(
    x: &[f64],
    offset: &[f64],
    gcol: &[f64],
    g: &DeformGeom,
    want_x: bool,
    want_offset: bool,
) -> (Vec<f64>, Vec<f64>) {
    let kk = g.k * g.k;
    let nq = g.out_h() * g.out_w();
    let plane = g.h * g.w;
    let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut goff = if want_offset {
        vec![0.0; offset.len()]
    } else {
        Vec::new()
    };
    for j in 0..kk {
        for q in 0..nq {
            let (y, xx) = g.position(offset, j, q);
            let taps = bilinear_taps(y, xx, g.h, g.w);
            let mut dy = 0.0;
            let mut dx = 0.0;
            for c in 0..g.c_in {
                let gv = gcol[(c * kk + j) * nq + q];
                if gv == 0.0 {
                    continue;
                }
                let base = c * plane;
                for &(idx, wt, wy, wx) in &taps {
                    if want_x {
                        gx[base + idx] += wt * gv;
                    }
                    let v = x[base + idx];
                    dy += wy * v * gv;
                    dx += wx * v * gv;
                }
            }
            if want_offset {
                goff[(2 * j) * nq + q] += g.gamma * dy;
                goff[(2 * j + 1) * nq + q] += g.gamma * dx;
            }
        }
    }
    (gx, goff)
}

fn pool_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling of `c × h × w` to `c × oh × ow`. Works for both
/// shrinking and enlarging (the latter repeats pixels).
pub fn adaptive_avg_pool(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = pool_bounds(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bounds(j, w, ow);
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += src[y * w + xx];
                    }
                }
                out[(ch * oh + i) * ow + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1) = pool_bounds(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bounds(j, w, ow);
                let g = gout[(ch * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        gx[ch * h * w + y * w + xx] += g;
                    }
                }
            }
        }
    }
    gx
}

fn align_corners_src(i: usize, input: usize, output: usize) -> (usize, usize, f64) {
    if output <= 1 || input <= 1 {
        return (0, 0, 0.0);
    }
    let src = i as f64 * (input - 1) as f64 / (output - 1) as f64;
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize with aligned corners.
pub fn upsample_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let (y0, y1, ly) = align_corners_src(i, h, oh);
            for j in 0..ow {
                let (x0, x1, lx) = align_corners_src(j, w, ow);
                out[(ch * oh + i) * ow + j] = (1.0 - ly) * (1.0 - lx) * src[y0 * w + x0]
                    + (1.0 - ly) * lx * src[y0 * w + x1]
                    + ly * (1.0 - lx) * src[y1 * w + x0]
                    + ly * lx * src[y1 * w + x1];
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let (y0, y1, ly) = align_corners_src(i, h, oh);
            for j in 0..ow {
                let (x0, x1, lx) = align_corners_src(j, w, ow);
                let g = gout[(ch * oh + i) * ow + j];
                dst[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * g;
                dst[y0 * w + x1] += (1.0 - ly) * lx * g;
                dst[y1 * w + x0] += ly * (1.0 - lx) * g;
                dst[y1 * w + x1] += ly * lx * g;
            }
        }
    }
    gx
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflect-pad each plane by `pad` pixels (`pad < h`, `pad < w`).
pub fn reflect_pad(x: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            let sy = reflect(i as isize - pad as isize, h);
            for j in 0..ow {
                let sx = reflect(j as isize - pad as isize, w);
                out[(ch * oh + i) * ow + j] = x[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

pub fn reflect_pad_backward(gout: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            let sy = reflect(i as isize - pad as isize, h);
            for j in 0..ow {
                let sx = reflect(j as isize - pad as isize, w);
                gx[(ch * h + sy) * w + sx] += gout[(ch * oh + i) * ow + j];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_pool_matches_torch_windows() {
        // 5 -> 3 uses windows [0,2), [1,4), [3,5)
        let x: Vec<f64> = (0..5).map(|v| v as f64).collect();
        let out = adaptive_avg_pool(&x, 1, 1, 5, 1, 3);
        assert_eq!(out, vec![0.5, 2.0, 3.5]);
    }

    #[test]
    fn adaptive_pool_upsamples_by_repetition() {
        let x = vec![1.0, 2.0];
        let out = adaptive_avg_pool(&x, 1, 1, 2, 1, 4);
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let plane: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let p = reflect_pad(&plane, 1, 3, 3, 1);
        assert_eq!(&p[0..5], &[4.0, 3.0, 4.0, 5.0, 4.0]);
    }

    #[test]
    fn bilinear_taps_interpolate_and_zero_pad() {
        let plane = [1.0, 2.0, 3.0, 4.0];
        let v = |y: f64, x: f64| -> f64 {
            bilinear_taps(y, x, 2, 2)
                .iter()
                .map(|&(i, w, _, _)| w * plane[i])
                .sum()
        };
        assert_eq!(v(0.0, 0.0), 1.0);
        assert!((v(0.5, 0.5) - 2.5).abs() < 1e-12);
        assert_eq!(v(-1.0, 0.0), 0.0);
        assert!((v(-0.5, 0.0) - 0.5).abs() < 1e-12);
        assert_eq!(v(5.0, 5.0), 0.0);
        assert_eq!(v(1e300, -1e300), 0.0);
        assert!(v(f64::NAN, 0.0).is_nan());
    }
}
