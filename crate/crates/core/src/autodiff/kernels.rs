//! Raw numeric kernels behind the graph operations.
//!
//! Everything here works on flat row-major slices. Layouts:
//! feature maps are `[C, H, W]`, conv weights `[C_out, C_in, k, k]`,
//! sampling grids `[H, W, 2]` holding `(u, v)` source offsets in pixel
//! units measured from the map centre (see [`crate::nn::grid`]).

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

thread_local! {
    static COL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static DCOL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static PACK_A: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static PACK_B: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// First `n` elements of a grow-only scratch buffer. Contents are stale;
/// callers overwrite every element.
fn fit(buf: &mut Vec<f64>, n: usize) -> &mut [f64] {
    if buf.len() < n {
        buf.resize(n, 0.0);
    }
    &mut buf[..n]
}

/// Unfolds the input into a `[C_in*k*k, H'*W']` patch matrix.
fn im2col<'a>(x: &[f64], g: &ConvGeom, col: &'a mut Vec<f64>) -> &'a [f64] {
    let (oh, ow) = (g.out_h(), g.out_w());
    let col = fit(col, g.rows() * oh * ow);
    let mut at = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                for oy in 0..oh {
                    let src_row = &plane[(oy * g.stride + kh) * g.w + kw..];
                    let dst = &mut col[at..at + ow];
                    if g.stride == 1 {
                        dst.copy_from_slice(&src_row[..ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src_row[ox * g.stride];
                        }
                    }
                    at += ow;
                }
            }
        }
    }
    col
}

/// Adds a patch-matrix gradient back onto the input layout.
fn col2im(dcol: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut r = 0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let src = &dcol[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let base = (oy * g.stride + kh) * g.w + kw;
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, s) in src_row.iter().enumerate() {
                        plane[base + ox * g.stride] += s;
                    }
                }
                r += 1;
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `c[m x n] += a[m x kd] * b[kd x n]`, all row-major.
///
/// Every element of `c` receives its `kd` products one at a time in
/// increasing `kd` order, whatever the blocking, so results are identical
/// to the textbook triple loop. Panels of `a` and `b` are packed (and
/// zero-padded at the edges) so the inner kernel runs on contiguous data.
pub fn gemm_acc(m: usize, n: usize, kd: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_acc_t(m, n, kd, (a, false), (b, false), c);
}

/// As [`gemm_acc`]; a `true` flag means the operand is stored transposed
/// (`a` as `[kd x m]`, `b` as `[n x kd]`).
pub fn gemm_acc_t(m: usize, n: usize, kd: usize, a: (&[f64], bool), b: (&[f64], bool), c: &mut [f64]) {
    gemm(m, n, kd, a, b, c, true);
}

/// `c = a * b`, ignoring whatever `c` held.
fn gemm_set_t(m: usize, n: usize, kd: usize, a: (&[f64], bool), b: (&[f64], bool), c: &mut [f64]) {
    gemm(m, n, kd, a, b, c, false);
}

fn gemm(m: usize, n: usize, kd: usize, a: (&[f64], bool), b: (&[f64], bool), c: &mut [f64], accumulate: bool) {
    let (a, a_t) = a;
    let (b, b_t) = b;
    debug_assert!(a.len() >= m * kd && b.len() >= kd * n && c.len() >= m * n);
    let panels = m.div_ceil(MR);
    PACK_A.with_borrow_mut(|ap| {
        PACK_B.with_borrow_mut(|bp| {
            let ap = fit(ap, panels * kd * MR);
            for pi in 0..panels {
                let dst = &mut ap[pi * kd * MR..(pi + 1) * kd * MR];
                for r in 0..MR {
                    let i = pi * MR + r;
                    if i >= m {
                        (0..kd).for_each(|k| dst[k * MR + r] = 0.0);
                    } else if a_t {
                        (0..kd).for_each(|k| dst[k * MR + r] = a[k * m + i]);
                    } else {
                        let row = &a[i * kd..(i + 1) * kd];
                        row.iter().enumerate().for_each(|(k, v)| dst[k * MR + r] = *v);
                    }
                }
            }
            let bp = fit(bp, kd * NR);
            for j in (0..n).step_by(NR) {
                let nw = NR.min(n - j);
                if b_t {
                    for q in 0..NR {
                        if q < nw {
                            let col = &b[(j + q) * kd..(j + q + 1) * kd];
                            col.iter().enumerate().for_each(|(k, v)| bp[k * NR + q] = *v);
                        } else {
                            (0..kd).for_each(|k| bp[k * NR + q] = 0.0);
                        }
                    }
                } else {
                    for k in 0..kd {
                        let dst = &mut bp[k * NR..(k + 1) * NR];
                        dst[..nw].copy_from_slice(&b[k * n + j..k * n + j + nw]);
                        dst[nw..].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                for pi in 0..panels {
                    let i = pi * MR;
                    let mh = MR.min(m - i);
                    let mut acc = [[0.0; NR]; MR];
                    if accumulate {
                        for r in 0..mh {
                            acc[r][..nw].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + nw]);
                        }
                    }
                    micro_kernel(kd, &ap[pi * kd * MR..(pi + 1) * kd * MR], bp, &mut acc);
                    for r in 0..mh {
                        c[(i + r) * n + j..(i + r) * n + j + nw].copy_from_slice(&acc[r][..nw]);
                    }
                }
            }
        })
    });
}

#[inline(never)]
fn micro_kernel(kd: usize, ap: &[f64], bp: &[f64], acc: &mut [[f64; NR]; MR]) {
    let mut c = *acc;
    for k in 0..kd {
        let b: &[f64; NR] = bp[k * NR..(k + 1) * NR].try_into().unwrap();
        let a: &[f64; MR] = ap[k * MR..(k + 1) * MR].try_into().unwrap();
        for r in 0..MR {
            for q in 0..NR {
                c[r][q] += a[r] * b[q];
            }
        }
    }
    *acc = c;
}

/// Valid (unpadded) strided convolution.
///
/// Each output element is `bias[co]` followed by the products added in
/// `(ci, kh, kw)` order, so results match a naive nested loop exactly.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.cols();
    let mut out = Vec::with_capacity(g.c_out * p);
    for b in bias {
        out.extend(std::iter::repeat_n(*b, p));
    }
    COL.with_borrow_mut(|col| {
        let col = im2col(x, g, col);
        gemm_acc(g.c_out, p, g.rows(), weight, col, &mut out);
    });
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dweight: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let p = g.cols();
    let rows = g.rows();
    let dbias = need[2].then(|| {
        (0..g.c_out)
            .map(|co| dout[co * p..(co + 1) * p].iter().sum())
            .collect()
    });
    let dweight = need[1].then(|| {
        let mut dw = vec![0.0; g.c_out * rows];
        COL.with_borrow_mut(|col| {
            let col = im2col(x, g, col);
            gemm_set_t(g.c_out, rows, p, (dout, false), (col, true), &mut dw);
        });
        dw
    });
    let dx = need[0].then(|| {
        let mut dx = vec![0.0; g.c_in * g.h * g.w];
        DCOL.with_borrow_mut(|dcol| {
            let dcol = fit(dcol, rows * p);
            gemm_set_t(rows, p, g.c_out, (weight, true), (dout, false), dcol);
            col2im(dcol, g, &mut dx);
        });
        dx
    });
    ConvGrads { dx, dweight, dbias }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums; fixed order keeps results reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.k) / self.stride + 1
    }
}

/// Window maximum; returns the values and the flat input index of the
/// first maximal element of each window in row-major scan order.
pub fn maxpool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.c * oh * ow);
    let mut arg = Vec::with_capacity(g.c * oh * ow);
    for c in 0..g.c {
        let base = c * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * g.stride * g.w + ox * g.stride;
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.k {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Bilinear corner indices and weights for one sampling location.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear {
    /// Flat in-plane indices of (y0,x0), (y0,x1), (y1,x0), (y1,x1); only
    /// meaningful where the matching bit of `inside` is set.
    pub idx: [usize; 4],
    /// Bit `k` set when corner `k` lies inside the map.
    pub inside: u8,
    pub wx: f64,
    pub wy: f64,
}

impl Bilinear {
    const ALL: u8 = 0b1111;

    #[inline]
    pub fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let ix = u + (w as f64 - 1.0) / 2.0;
        let iy = v + (h as f64 - 1.0) / 2.0;
        let x0f = ix.floor();
        let y0f = iy.floor();
        let wx = ix - x0f;
        let wy = iy - y0f;
        if !(x0f.is_finite() && y0f.is_finite()) || x0f < -1.0 || y0f < -1.0 || x0f >= w as f64 || y0f >= h as f64 {
            return Self {
                idx: [0; 4],
                inside: 0,
                wx,
                wy,
            };
        }
        // Both corners now lie in -1..=w (resp. h), so these casts are exact.
        let (x0, y0) = (x0f as isize, y0f as isize);
        let (wi, hi) = (w as isize, h as isize);
        let xin = [x0 >= 0, x0 + 1 < wi];
        let yin = [y0 >= 0, y0 + 1 < hi];
        let base = y0 * wi + x0;
        let offs = [0, 1, wi, wi + 1];
        let mut idx = [0usize; 4];
        let mut inside = 0u8;
        for k in 0..4 {
            if yin[k / 2] && xin[k % 2] {
                idx[k] = (base + offs[k]) as usize;
                inside |= 1 << k;
            }
        }
        Self { idx, inside, wx, wy }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (wx, wy) = (self.wx, self.wy);
        [(1.0 - wx) * (1.0 - wy), wx * (1.0 - wy), (1.0 - wx) * wy, wx * wy]
    }

    #[inline]
    pub fn corner(&self, k: usize) -> Option<usize> {
        (self.inside & (1 << k) != 0).then_some(self.idx[k])
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        self.sample_with(plane, &self.weights())
    }

    #[inline]
    fn sample_with(&self, plane: &[f64], w: &[f64; 4]) -> f64 {
        let mut acc = 0.0;
        if self.inside == Self::ALL {
            let i = self.idx;
            acc += plane[i[0]] * w[0];
            acc += plane[i[1]] * w[1];
            acc += plane[i[2]] * w[2];
            acc += plane[i[3]] * w[3];
            return acc;
        }
        for k in 0..4 {
            if let Some(i) = self.corner(k) {
                acc += plane[i] * w[k];
            }
        }
        acc
    }

    #[inline]
    fn corners(&self, plane: &[f64]) -> [f64; 4] {
        if self.inside == Self::ALL {
            return self.idx.map(|i| plane[i]);
        }
        let mut v = [0.0; 4];
        for (k, val) in v.iter_mut().enumerate() {
            if let Some(i) = self.corner(k) {
                *val = plane[i];
            }
        }
        v
    }
}

pub fn grid_sample_forward(x: &[f64], c: usize, h: usize, w: usize, grid: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let b = Bilinear::new(grid[2 * p], grid[2 * p + 1], h, w);
        if b.inside == 0 {
            continue;
        }
        let wts = b.weights();
        for ch in 0..c {
            out[ch * hw + p] = b.sample_with(&x[ch * hw..(ch + 1) * hw], &wts);
        }
    }
    out
}

pub fn grid_sample_backward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    grid: &[f64],
    dout: &[f64],
    need: [bool; 2],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = h * w;
    let mut dx = need[0].then(|| vec![0.0; c * hw]);
    let mut dgrid = need[1].then(|| vec![0.0; 2 * hw]);
    for p in 0..hw {
        let b = Bilinear::new(grid[2 * p], grid[2 * p + 1], h, w);
        if b.inside == 0 {
            continue;
        }
        let wts = b.weights();
        if let Some(dx) = dx.as_mut() {
            for ch in 0..c {
                let d = dout[ch * hw + p];
                let plane = &mut dx[ch * hw..(ch + 1) * hw];
                for k in 0..4 {
                    if let Some(i) = b.corner(k) {
                        plane[i] += d * wts[k];
                    }
                }
            }
        }
        if let Some(dg) = dgrid.as_mut() {
            let (mut gu, mut gv) = (0.0, 0.0);
            for ch in 0..c {
                let d = dout[ch * hw + p];
                let v = b.corners(&x[ch * hw..(ch + 1) * hw]);
                gu += d * ((v[1] - v[0]) * (1.0 - b.wy) + (v[3] - v[2]) * b.wy);
                gv += d * ((v[2] - v[0]) * (1.0 - b.wx) + (v[3] - v[1]) * b.wx);
            }
            dg[2 * p] = gu;
            dg[2 * p + 1] = gv;
        }
    }
    (dx, dgrid)
}

/// Regular target grid in centred pixel units: `j - (W-1)/2`, `i - (H-1)/2`.
#[inline]
pub fn target_offsets(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    (j as f64 - (w as f64 - 1.0) / 2.0, i as f64 - (h as f64 - 1.0) / 2.0)
}

/// Source offsets for every target pixel under the normalized affine `phi`.
pub fn affine_grid_forward(phi: &[f64; 6], h: usize, w: usize) -> Vec<f64> {
    let (hf, wf) = (h as f64, w as f64);
    let (rx, ry) = (wf / hf, hf / wf);
    let (tx, ty) = (wf / 2.0, hf / 2.0);
    let mut grid = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = target_offsets(i, j, h, w);
            grid.push(phi[0] * u + phi[1] * (v * rx) + phi[2] * tx);
            grid.push(phi[3] * (u * ry) + phi[4] * v + phi[5] * ty);
        }
    }
    grid
}

pub fn affine_grid_backward(dgrid: &[f64], h: usize, w: usize) -> [f64; 6] {
    let (hf, wf) = (h as f64, w as f64);
    let (rx, ry) = (wf / hf, hf / wf);
    let (tx, ty) = (wf / 2.0, hf / 2.0);
    let mut d = [0.0; 6];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = target_offsets(i, j, h, w);
            let p = i * w + j;
            let (du, dv) = (dgrid[2 * p], dgrid[2 * p + 1]);
            d[0] += du * u;
            d[1] += du * v * rx;
            d[2] += du * tx;
            d[3] += dv * u * ry;
            d[4] += dv * v;
            d[5] += dv * ty;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &[f64], wt: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let xv = x[(ci * g.h + oy * g.stride + kh) * g.w + ox * g.stride + kw];
                                let wv = wt[((co * g.c_in + ci) * g.k + kh) * g.k + kw];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn naive_pool(x: &[f64], g: &PoolGeom) -> Vec<f64> {
        let mut out = vec![];
        for c in 0..g.c {
            for oy in 0..g.out_h() {
                for ox in 0..g.out_w() {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            m = m.max(x[(c * g.h + oy * g.stride + ky) * g.w + ox * g.stride + kx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let g = ConvGeom {
                c_in: rng.gen_range(1..4),
                h: rng.gen_range(5..17),
                w: rng.gen_range(5..17),
                c_out: rng.gen_range(1..5),
                k: rng.gen_range(1..5),
                stride: rng.gen_range(1..4),
            };
            let x: Vec<f64> = (0..g.c_in * g.h * g.w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..g.c_out * g.c_in * g.k * g.k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..g.c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(conv2d_forward(&x, &wt, &b, &g), naive_conv(&x, &wt, &b, &g));
        }
    }

    #[test]
    fn pool_matches_naive_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let k = rng.gen_range(1..5);
            let g = PoolGeom {
                c: rng.gen_range(1..4),
                h: rng.gen_range(k..17),
                w: rng.gen_range(k..17),
                k,
                stride: rng.gen_range(1..5),
            };
            let x: Vec<f64> = (0..g.c * g.h * g.w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(maxpool_forward(&x, &g).0, naive_pool(&x, &g));
        }
    }

    #[test]
    fn bilinear_center_of_two_by_two() {
        // Centre of a 2x2 map is the origin of the centred offsets.
        let b = Bilinear::new(0.0, 0.0, 2, 2);
        assert_eq!(b.sample(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    #[test]
    fn identity_grid_lands_on_pixel_centres() {
        let phi = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        for &(h, w) in &[(84, 84), (39, 39), (7, 11), (49, 22)] {
            let grid = affine_grid_forward(&phi, h, w);
            let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            assert_eq!(grid_sample_forward(&x, 1, h, w, &grid), x);
        }
    }
}
