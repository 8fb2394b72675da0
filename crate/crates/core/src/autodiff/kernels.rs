//! Slice-level numeric kernels behind the differentiable ops.
//!
//! Every reduction accumulates sequentially along its inner index, starting
//! from zero, so results are reproducible bit-for-bit and agree exactly with
//! naive loop references that use the same order.

use crate::tensor::Real;

/// `out[m,n] += a[m,k] · b[k,n]`.
pub fn matmul_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`.
pub fn matmul_at_b_acc<S: Real>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + av * gv;
            }
        }
    }
}

pub fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a "same"-padded strided 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
    pub fn h_out(&self) -> usize {
        self.h.div_ceil(self.stride)
    }
    pub fn w_out(&self) -> usize {
        self.w.div_ceil(self.stride)
    }
    fn col_width(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

const CONV_CHUNK_ROWS: usize = 16 * 1024;

fn conv_chunk(g: &ConvGeom) -> usize {
    let per_map = g.h_out() * g.w_out();
    (CONV_CHUNK_ROWS / per_map).clamp(1, g.batch)
}

fn im2col<S: Real>(x: &[S], g: &ConvGeom, n0: usize, n1: usize, col: &mut Vec<S>) {
    let (ho, wo, k, pad) = (g.h_out(), g.w_out(), g.k, g.pad() as isize);
    let cw = g.col_width();
    col.clear();
    col.resize((n1 - n0) * ho * wo * cw, S::zero());
    let mut row = 0;
    for n in n0..n1 {
        let img = &x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut col[row * cw..(row + 1) * cw];
                let mut j = 0;
                for ci in 0..g.c_in {
                    let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    for ky in 0..k {
                        let iy = (oy * g.stride) as isize + ky as isize - pad;
                        for kx in 0..k {
                            let ix = (ox * g.stride) as isize + kx as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                dst[j] = plane[iy as usize * g.w + ix as usize];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_acc<S: Real>(col: &[S], g: &ConvGeom, n0: usize, n1: usize, dx: &mut [S]) {
    let (ho, wo, k, pad) = (g.h_out(), g.w_out(), g.k, g.pad() as isize);
    let cw = g.col_width();
    let mut row = 0;
    for n in n0..n1 {
        let img = &mut dx[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let src = &col[row * cw..(row + 1) * cw];
                let mut j = 0;
                for ci in 0..g.c_in {
                    for ky in 0..k {
                        let iy = (oy * g.stride) as isize + ky as isize - pad;
                        for kx in 0..k {
                            let ix = (ox * g.stride) as isize + kx as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                let idx = ci * g.h * g.w + iy as usize * g.w + ix as usize;
                                img[idx] = img[idx] + src[j];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution: `x[N,Cin,H,W]`, `weight[Cout,Cin,k,k]`, `bias[Cout]` → `[N,Cout,H',W']`.
pub fn conv2d_forward<S: Real>(x: &[S], weight: &[S], bias: &[S], g: &ConvGeom) -> Vec<S> {
    let (ho, wo, cw) = (g.h_out(), g.w_out(), g.col_width());
    let per_map = ho * wo;
    let wt = transpose(weight, g.c_out, cw);
    let mut out = vec![S::zero(); g.batch * g.c_out * per_map];
    let chunk = conv_chunk(g);
    let mut col = Vec::new();
    let mut rows = Vec::new();
    let mut n0 = 0;
    while n0 < g.batch {
        let n1 = (n0 + chunk).min(g.batch);
        im2col(x, g, n0, n1, &mut col);
        let nrows = (n1 - n0) * per_map;
        rows.clear();
        rows.resize(nrows * g.c_out, S::zero());
        matmul_acc(&col, &wt, &mut rows, nrows, cw, g.c_out);
        for n in n0..n1 {
            for p in 0..per_map {
                let r = (n - n0) * per_map + p;
                for co in 0..g.c_out {
                    out[(n * g.c_out + co) * per_map + p] = rows[r * g.c_out + co] + bias[co];
                }
            }
        }
        n0 = n1;
    }
    out
}

/// Gradients of the convolution. Returns `(dx, dweight, dbias)`, each only when requested.
pub fn conv2d_backward<S: Real>(
    x: &[S],
    weight: &[S],
    grad_out: &[S],
    g: &ConvGeom,
    need: [bool; 3],
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let (ho, wo, cw) = (g.h_out(), g.w_out(), g.col_width());
    let per_map = ho * wo;
    let mut dx = need[0].then(|| vec![S::zero(); x.len()]);
    let mut dwt = need[1].then(|| vec![S::zero(); cw * g.c_out]);
    let db = need[2].then(|| {
        let mut db = vec![S::zero(); g.c_out];
        for n in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let plane = &grad_out[(n * g.c_out + co) * per_map..(n * g.c_out + co + 1) * per_map];
                *d = plane.iter().fold(*d, |acc, &v| acc + v);
            }
        }
        db
    });
    if dx.is_some() || dwt.is_some() {
        let chunk = conv_chunk(g);
        let mut col = Vec::new();
        let mut grows = Vec::new();
        let mut dcol = Vec::new();
        let mut n0 = 0;
        while n0 < g.batch {
            let n1 = (n0 + chunk).min(g.batch);
            let nrows = (n1 - n0) * per_map;
            grows.clear();
            grows.resize(nrows * g.c_out, S::zero());
            for n in n0..n1 {
                for co in 0..g.c_out {
                    for p in 0..per_map {
                        grows[((n - n0) * per_map + p) * g.c_out + co] =
                            grad_out[(n * g.c_out + co) * per_map + p];
                    }
                }
            }
            if let Some(dwt) = dwt.as_mut() {
                im2col(x, g, n0, n1, &mut col);
                matmul_at_b_acc(&col, &grows, dwt, nrows, cw, g.c_out);
            }
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize(nrows * cw, S::zero());
                matmul_acc(&grows, weight, &mut dcol, nrows, g.c_out, cw);
                col2im_acc(&dcol, g, n0, n1, dx);
            }
            n0 = n1;
        }
    }
    let dw = dwt.map(|dwt| transpose(&dwt, cw, g.c_out));
    (dx, dw, db)
}

/// Batched scaled dot-product attention. Shapes: `q[B,m,d]`, `k[B,n,d]`, `v[B,n,dv]`.
/// Returns the output `[B,m,dv]` and the softmax probabilities `[B,m,n]`.
pub fn attention_forward<S: Real>(
    q: &[S],
    k: &[S],
    v: &[S],
    b: usize,
    m: usize,
    n: usize,
    d: usize,
    dv: usize,
) -> (Vec<S>, Vec<S>) {
    let scale = S::c(d as f64).sqrt();
    let mut out = vec![S::zero(); b * m * dv];
    let mut probs = vec![S::zero(); b * m * n];
    for g in 0..b {
        let qg = &q[g * m * d..(g + 1) * m * d];
        let kg = &k[g * n * d..(g + 1) * n * d];
        let vg = &v[g * n * dv..(g + 1) * n * dv];
        for i in 0..m {
            let qi = &qg[i * d..(i + 1) * d];
            let p = &mut probs[(g * m + i) * n..(g * m + i + 1) * n];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &kg[j * d..(j + 1) * d];
                let dot = qi.iter().zip(kj).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                *pj = dot / scale;
            }
            softmax_in_place(p);
            let oi = &mut out[(g * m + i) * dv..(g * m + i + 1) * dv];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &vg[j * dv..(j + 1) * dv];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o = *o + pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Max-subtracted softmax.
pub fn softmax_in_place<S: Real>(x: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Gradients of batched attention given the saved probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<S: Real>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    grad_out: &[S],
    b: usize,
    m: usize,
    n: usize,
    d: usize,
    dv: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let scale = S::c(d as f64).sqrt();
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dvv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); n];
    for g in 0..b {
        for i in 0..m {
            let p = &probs[(g * m + i) * n..(g * m + i + 1) * n];
            let go = &grad_out[(g * m + i) * dv..(g * m + i + 1) * dv];
            for j in 0..n {
                let vj = &v[(g * n + j) * dv..(g * n + j + 1) * dv];
                dp[j] = go.iter().zip(vj).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                let dvj = &mut dvv[(g * n + j) * dv..(g * n + j + 1) * dv];
                for (o, &gv) in dvj.iter_mut().zip(go) {
                    *o = *o + p[j] * gv;
                }
            }
            let inner = p.iter().zip(&dp).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
            let qi = &q[(g * m + i) * d..(g * m + i + 1) * d];
            for j in 0..n {
                let ds = p[j] * (dp[j] - inner) / scale;
                if ds == S::zero() {
                    continue;
                }
                let kj = &k[(g * n + j) * d..(g * n + j + 1) * d];
                let dqi = &mut dq[(g * m + i) * d..(g * m + i + 1) * d];
                for (o, &kv) in dqi.iter_mut().zip(kj) {
                    *o = *o + ds * kv;
                }
                let dkj = &mut dk[(g * n + j) * d..(g * n + j + 1) * d];
                for (o, &qv) in dkj.iter_mut().zip(qi) {
                    *o = *o + ds * qv;
                }
            }
        }
    }
    (dq, dk, dvv)
}

/// Per-row standardization `(x − mean) / (std + eps)` with population std.
/// Returns the output and per-row `(std, eps)`-denominators.
pub fn standardize_rows<S: Real>(x: &[S], width: usize, eps: S) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / width;
    let mut out = vec![S::zero(); x.len()];
    let mut stds = vec![S::zero(); rows];
    let mut denoms = vec![S::zero(); rows];
    let nf = S::c(width as f64);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().fold(S::zero(), |a, &b| a + b) / nf;
        let var = row
            .iter()
            .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
            / nf;
        let std = var.sqrt();
        let denom = std + eps;
        for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = (v - mean) / denom;
        }
        stds[r] = std;
        denoms[r] = denom;
    }
    (out, stds, denoms)
}

pub fn standardize_rows_backward<S: Real>(
    y: &[S],
    stds: &[S],
    denoms: &[S],
    grad: &[S],
    width: usize,
) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    let nf = S::c(width as f64);
    for r in 0..stds.len() {
        let yr = &y[r * width..(r + 1) * width];
        let gr = &grad[r * width..(r + 1) * width];
        let (std, denom) = (stds[r], denoms[r]);
        // xc = y·denom; dL/dxc_j = g_j/denom − (Σ g_i xc_i)/denom² · xc_j/(n·std)
        let coeff = if std > S::zero() {
            let gy = gr.iter().zip(yr).fold(S::zero(), |a, (&g, &y)| a + g * y);
            gy * denom / (denom * nf * std)
        } else {
            S::zero()
        };
        let dxr = &mut dx[r * width..(r + 1) * width];
        let mut mean = S::zero();
        for j in 0..width {
            let xc = yr[j] * denom;
            dxr[j] = gr[j] / denom - coeff * xc / denom;
            mean = mean + dxr[j];
        }
        let mean = mean / nf;
        for v in dxr.iter_mut() {
            *v = *v - mean;
        }
    }
    dx
}

/// Bilinear sample with zero padding outside `[0,h−1]×[0,w−1]`; returns `(offset, weight)` taps.
pub fn bilinear_taps<S: Real>(map_h: usize, map_w: usize, y: f64, x: f64) -> [(usize, S, bool); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let corners = [
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x0 + 1.0, (1.0 - wy) * wx),
        (y0 + 1.0, x0, wy * (1.0 - wx)),
        (y0 + 1.0, x0 + 1.0, wy * wx),
    ];
    corners.map(|(cy, cx, wgt)| {
        let inside = wgt != 0.0
            && cy >= 0.0
            && cx >= 0.0
            && cy <= (map_h - 1) as f64
            && cx <= (map_w - 1) as f64;
        if inside {
            (cy as usize * map_w + cx as usize, S::c(wgt), true)
        } else {
            (0, S::zero(), false)
        }
    })
}

/// Crops `size×size` bilinear patches, one per map, centered at `(y, x)`.
pub fn crop_patches<S: Real>(
    maps: &[S],
    map_h: usize,
    map_w: usize,
    centers: &[(f64, f64)],
    size: usize,
) -> Vec<S> {
    let r = (size / 2) as f64;
    let mut out = vec![S::zero(); centers.len() * size * size];
    for (p, &(cy, cx)) in centers.iter().enumerate() {
        let map = &maps[p * map_h * map_w..(p + 1) * map_h * map_w];
        for dy in 0..size {
            for dx in 0..size {
                let taps = bilinear_taps::<S>(map_h, map_w, cy + dy as f64 - r, cx + dx as f64 - r);
                let mut acc = S::zero();
                for (off, wgt, inside) in taps {
                    if inside {
                        acc = acc + wgt * map[off];
                    }
                }
                out[(p * size + dy) * size + dx] = acc;
            }
        }
    }
    out
}

pub fn crop_patches_backward<S: Real>(
    grad: &[S],
    map_h: usize,
    map_w: usize,
    centers: &[(f64, f64)],
    size: usize,
) -> Vec<S> {
    let r = (size / 2) as f64;
    let mut dmaps = vec![S::zero(); centers.len() * map_h * map_w];
    for (p, &(cy, cx)) in centers.iter().enumerate() {
        let dmap = &mut dmaps[p * map_h * map_w..(p + 1) * map_h * map_w];
        for dy in 0..size {
            for dx in 0..size {
                let g = grad[(p * size + dy) * size + dx];
                let taps = bilinear_taps::<S>(map_h, map_w, cy + dy as f64 - r, cx + dx as f64 - r);
                for (off, wgt, inside) in taps {
                    if inside {
                        dmap[off] = dmap[off] + wgt * g;
                    }
                }
            }
        }
    }
    dmaps
}

/// Axis permutation of a row-major tensor.
pub fn permute<S: Real>(x: &[S], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], strides[last]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_s == 1 {
            out.extend_from_slice(&x[base..base + inner_n]);
        } else {
            out.extend((0..inner_n).map(|i| x[base + i * inner_s]));
        }
        // advance all axes but the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
