//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<S: Real> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("add", ta.shape(), tb.shape())?;
        let out = ta.zip_map(&tb, |x, y| x + y)?;
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("sub", ta.shape(), tb.shape())?;
        let out = ta.zip_map(&tb, |x, y| x - y)?;
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("mul", ta.shape(), tb.shape())?;
        let out = ta.zip_map(&tb, |x, y| x * y)?;
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&tb, |g, y| g * y).expect("shape")),
                    need[1].then(|| g.zip_map(&ta, |g, x| g * x).expect("shape")),
                ]
            }),
        )
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s; `y` is repeated over the leading axes.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x).clone(), self.value(y).clone());
        let (xs, ys) = (tx.shape(), ty.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape(format!(
                "add_bcast: {ys:?} is not a suffix of {xs:?}"
            )));
        }
        let inner = ty.len();
        let mut out = tx.to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(ty.data()) {
                *o = *o + v;
            }
        }
        let y_shape = ys.to_vec();
        self.push(
            "add_bcast",
            Tensor::from_parts(xs.to_vec(), out),
            &[x, y],
            Box::new(move |g, need| {
                let gy = need[1].then(|| {
                    let mut acc = vec![S::zero(); inner];
                    for chunk in g.data().chunks(inner) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a = *a + v;
                        }
                    }
                    Tensor::from_parts(y_shape.clone(), acc)
                });
                vec![Some(g.clone()), gy]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = S::c(factor);
        let out = self.value(a).map(|v| v * c);
        self.push(
            "scale",
            out,
            &[a],
            Box::new(move |g, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        let out = ta.map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(
            "relu",
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.zip_map(&ta, |g, x| if x > S::zero() { g } else { S::zero() })
                        .expect("shape"),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| S::one() / (S::one() + (-v).exp()));
        let y = out.clone();
        self.push(
            "sigmoid",
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.zip_map(&y, |g, y| g * y * (S::one() - y)).expect("shape"),
                )]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        let y = out.clone();
        self.push(
            "tanh",
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.zip_map(&y, |g, y| g * (S::one() - y * y)).expect("shape"),
                )]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a).clone();
        let in_shape = ta.shape().to_vec();
        let out = ta.reshape(shape)?;
        self.push(
            "reshape",
            out,
            &[a],
            Box::new(move |g, _| vec![Some(g.reshape(&in_shape).expect("shape"))]),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = self.value(a).clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..ta.rank()).collect::<Vec<_>>() {
            return Err(Error::shape(format!(
                "permute: {axes:?} is not a permutation of rank {}",
                ta.rank()
            )));
        }
        let (shape, data) = kernels::permute(ta.data(), ta.shape(), axes);
        let inv = kernels::inverse_axes(axes);
        let out_shape = shape.clone();
        self.push(
            "permute",
            Tensor::from_parts(shape, data),
            &[a],
            Box::new(move |g, _| {
                let (s, d) = kernels::permute(g.data(), &out_shape, &inv);
                vec![Some(Tensor::from_parts(s, d))]
            }),
        )
    }

    /// Plain matrix product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} × {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let bt = kernels::transpose(tb.data(), k, n);
                    let mut d = vec![S::zero(); m * k];
                    kernels::matmul_acc(g.data(), &bt, &mut d, m, n, k);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![S::zero(); k * n];
                    kernels::matmul_at_b_acc(ta.data(), g.data(), &mut d, m, k, n);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x).clone(), self.value(w).clone());
        let xin = *tx.shape().last().unwrap_or(&0);
        if tw.rank() != 2 || tw.shape()[0] != xin {
            return Err(Error::shape(format!(
                "linear: input {:?} against weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (din, dout) = (tw.shape()[0], tw.shape()[1]);
        let tb = match b {
            Some(b) => {
                let tb = self.value(b).clone();
                if tb.shape() != [dout] {
                    return Err(Error::shape(format!(
                        "linear: bias {:?} for {dout} outputs",
                        tb.shape()
                    )));
                }
                Some(tb)
            }
            None => None,
        };
        let rows = tx.len() / din;
        let mut out = vec![S::zero(); rows * dout];
        kernels::matmul_acc(tx.data(), tw.data(), &mut out, rows, din, dout);
        if let Some(tb) = &tb {
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = dout;
        let x_shape = tx.shape().to_vec();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            "linear",
            Tensor::from_parts(shape, out),
            &parents,
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let wt = kernels::transpose(tw.data(), din, dout);
                    let mut d = vec![S::zero(); rows * din];
                    kernels::matmul_acc(g.data(), &wt, &mut d, rows, dout, din);
                    Tensor::from_parts(x_shape.clone(), d)
                });
                let gw = need[1].then(|| {
                    let mut d = vec![S::zero(); din * dout];
                    kernels::matmul_at_b_acc(tx.data(), g.data(), &mut d, rows, din, dout);
                    Tensor::from_parts(vec![din, dout], d)
                });
                let mut res = vec![gx, gw];
                if need.len() == 3 {
                    res.push(need[2].then(|| {
                        let mut d = vec![S::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                        Tensor::from_parts(vec![dout], d)
                    }));
                }
                res
            }),
        )
    }

    /// "Same"-padded strided convolution over `[N,Cin,H,W]` (or unbatched `[Cin,H,W]`).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (tx, tw, tb) = (
            self.value(x).clone(),
            self.value(weight).clone(),
            self.value(bias).clone(),
        );
        let (geom, out_shape) = conv_geometry(tx.shape(), tw.shape(), tb.shape(), stride)?;
        let out = kernels::conv2d_forward(tx.data(), tw.data(), tb.data(), &geom);
        self.push(
            "conv2d",
            Tensor::from_parts(out_shape, out),
            &[x, weight, bias],
            Box::new(move |g, need| {
                let (dx, dw, db) = kernels::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    g.data(),
                    &geom,
                    [need[0], need[1], need[2]],
                );
                vec![
                    dx.map(|d| Tensor::from_parts(tx.shape().to_vec(), d)),
                    dw.map(|d| Tensor::from_parts(tw.shape().to_vec(), d)),
                    db.map(|d| Tensor::from_parts(tb.shape().to_vec(), d)),
                ]
            }),
        )
    }

    /// Scaled dot-product attention over groups: `q[B,m,d]`, `k[B,n,d]`, `v[B,n,dv]`
    /// (rank-2 inputs are a single group).
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (tq, tk, tv) = (
            self.value(q).clone(),
            self.value(k).clone(),
            self.value(v).clone(),
        );
        let dims = attention_dims(tq.shape(), tk.shape(), tv.shape())?;
        let AttnDims { b, m, n, d, dv } = dims;
        let (out, probs) = kernels::attention_forward(tq.data(), tk.data(), tv.data(), b, m, n, d, dv);
        let mut out_shape = tq.shape().to_vec();
        *out_shape.last_mut().expect("rank ≥ 2") = dv;
        self.push(
            "attention",
            Tensor::from_parts(out_shape, out),
            &[q, k, v],
            Box::new(move |g, _| {
                let (dq, dk, dvv) = kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    &probs,
                    g.data(),
                    b,
                    m,
                    n,
                    d,
                    dv,
                );
                vec![
                    Some(Tensor::from_parts(tq.shape().to_vec(), dq)),
                    Some(Tensor::from_parts(tk.shape().to_vec(), dk)),
                    Some(Tensor::from_parts(tv.shape().to_vec(), dvv)),
                ]
            }),
        )
    }

    /// Per-row `(x − mean)/(std + eps)` over the last axis.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x).clone();
        let width = *tx.shape().last().expect("rank ≥ 1");
        let (y, stds, denoms) = kernels::standardize_rows(tx.data(), width, S::c(eps));
        let out = Tensor::from_parts(tx.shape().to_vec(), y);
        let saved = out.clone();
        self.push(
            "standardize",
            out,
            &[x],
            Box::new(move |g, _| {
                let dx = kernels::standardize_rows_backward(
                    saved.data(),
                    &stds,
                    &denoms,
                    g.data(),
                    width,
                );
                vec![Some(Tensor::from_parts(saved.shape().to_vec(), dx))]
            }),
        )
    }

    /// `x ⊙ gamma + beta` with `gamma`, `beta` over the last axis.
    pub fn affine_last(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (
            self.value(x).clone(),
            self.value(gamma).clone(),
            self.value(beta).clone(),
        );
        let width = *tx.shape().last().expect("rank ≥ 1");
        if tg.shape() != [width] || tb.shape() != [width] {
            return Err(Error::shape(format!(
                "affine_last: {:?} with gamma {:?} beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let mut out = tx.to_vec();
        for row in out.chunks_mut(width) {
            for ((o, &gm), &bt) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = *o * gm + bt;
            }
        }
        self.push(
            "affine_last",
            Tensor::from_parts(tx.shape().to_vec(), out),
            &[x, gamma, beta],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut d = g.to_vec();
                    for row in d.chunks_mut(width) {
                        for (o, &gm) in row.iter_mut().zip(tg.data()) {
                            *o = *o * gm;
                        }
                    }
                    Tensor::from_parts(tx.shape().to_vec(), d)
                });
                let mut dgamma = vec![S::zero(); width];
                let mut dbeta = vec![S::zero(); width];
                for (grow, xrow) in g.data().chunks(width).zip(tx.data().chunks(width)) {
                    for j in 0..width {
                        dgamma[j] = dgamma[j] + grow[j] * xrow[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                }
                vec![
                    gx,
                    Some(Tensor::from_parts(vec![width], dgamma)),
                    Some(Tensor::from_parts(vec![width], dbeta)),
                ]
            }),
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.standardize(x, eps)?;
        self.affine_last(s, gamma, beta)
    }

    /// Selects rows along axis 1: `x[P,T,D]`, `index[P][n]` → `[P,n,D]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let tx = self.value(x).clone();
        if tx.rank() != 3 || index.len() != tx.shape()[0] {
            return Err(Error::shape(format!(
                "gather_rows: input {:?} with {} index rows",
                tx.shape(),
                index.len()
            )));
        }
        let (p, t, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let n = index.first().map_or(0, Vec::len);
        if n == 0 || index.iter().any(|r| r.len() != n || r.iter().any(|&i| i >= t)) {
            return Err(Error::shape(
                "gather_rows: index rows must be non-empty, equal length and in range",
            ));
        }
        let mut out = Vec::with_capacity(p * n * d);
        for (pi, rows) in index.iter().enumerate() {
            for &r in rows {
                out.extend_from_slice(&tx.data()[(pi * t + r) * d..(pi * t + r + 1) * d]);
            }
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![p, n, d], out),
            &[x],
            Box::new(move |g, _| {
                let mut dx = vec![S::zero(); p * t * d];
                for (pi, rows) in index.iter().enumerate() {
                    for (j, &r) in rows.iter().enumerate() {
                        let src = &g.data()[(pi * n + j) * d..(pi * n + j + 1) * d];
                        let dst = &mut dx[(pi * t + r) * d..(pi * t + r + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![p, t, d], dx))]
            }),
        )
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn repeat_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let mut data = Vec::with_capacity(tx.len() * n);
        for _ in 0..n {
            data.extend_from_slice(tx.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tx.shape());
        let inner = tx.len();
        let x_shape = tx.shape().to_vec();
        self.push(
            "repeat_leading",
            Tensor::from_parts(shape, data),
            &[x],
            Box::new(move |g, _| {
                let mut acc = vec![S::zero(); inner];
                for chunk in g.data().chunks(inner) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a = *a + v;
                    }
                }
                vec![Some(Tensor::from_parts(x_shape.clone(), acc))]
            }),
        )
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let first = tensors
            .first()
            .ok_or_else(|| Error::shape("concat_last of nothing"))?;
        let lead = &first.shape()[..first.rank() - 1];
        let widths: Vec<usize> = tensors
            .iter()
            .map(|t| {
                if &t.shape()[..t.rank() - 1] != lead {
                    Err(Error::shape(format!(
                        "concat_last: {:?} vs {:?}",
                        t.shape(),
                        first.shape()
                    )))
                } else {
                    Ok(*t.shape().last().expect("rank ≥ 1"))
                }
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (t, &w) in tensors.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        self.push(
            "concat_last",
            Tensor::from_parts(shape, out),
            parts,
            Box::new(move |g, need| {
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths.len());
                for ((&w, shape), &nd) in widths.iter().zip(&shapes).zip(need) {
                    if nd {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        res.push(Some(Tensor::from_parts(shape.clone(), d)));
                    } else {
                        res.push(None);
                    }
                    offset += w;
                }
                res
            }),
        )
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x).clone();
        let width = *tx.shape().last().expect("rank ≥ 1");
        if start + len > width || len == 0 {
            return Err(Error::shape(format!(
                "slice_last [{start}, {}) of width {width}",
                start + len
            )));
        }
        let rows = tx.len() / width;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = len;
        let x_shape = tx.shape().to_vec();
        self.push(
            "slice_last",
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![S::zero(); rows * width];
                for r in 0..rows {
                    d[r * width + start..r * width + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::from_parts(x_shape.clone(), d))]
            }),
        )
    }

    /// Bilinear `size×size` patches from `maps[P,H,W]`, one center `(y, x)` per map.
    /// Samples outside the map are zero. Centers are not differentiated.
    pub fn crop_patches(&mut self, maps: Var, centers: Arc<Vec<(f64, f64)>>, size: usize) -> Result<Var> {
        if size % 2 == 0 {
            return Err(Error::config(format!("crop size must be odd, got {size}")));
        }
        let tm = self.value(maps).clone();
        if tm.rank() != 3 || tm.shape()[0] != centers.len() {
            return Err(Error::shape(format!(
                "crop_patches: maps {:?} with {} centers",
                tm.shape(),
                centers.len()
            )));
        }
        let (p, h, w) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
        let out = kernels::crop_patches(tm.data(), h, w, &centers, size);
        self.push(
            "crop_patches",
            Tensor::from_parts(vec![p, size * size], out),
            &[maps],
            Box::new(move |g, _| {
                let d = kernels::crop_patches_backward(g.data(), h, w, &centers, size);
                vec![Some(Tensor::from_parts(vec![p, h, w], d))]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let shape = tx.shape().to_vec();
        self.push(
            "sum_all",
            Tensor::scalar(tx.sum()),
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Mean absolute value over all elements (subgradient 0 at 0).
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let n = tx.len();
        let total = tx.data().iter().fold(S::zero(), |a, &v| a + v.abs());
        let inv = S::c(1.0 / n as f64);
        self.push(
            "mean_abs",
            Tensor::scalar(total * inv),
            &[x],
            Box::new(move |g, _| {
                let c = g.item() * inv;
                vec![Some(tx.map(|v| {
                    if v > S::zero() {
                        c
                    } else if v < S::zero() {
                        -c
                    } else {
                        S::zero()
                    }
                }))]
            }),
        )
    }
}

fn conv_geometry(
    x: &[usize],
    w: &[usize],
    b: &[usize],
    stride: usize,
) -> Result<(ConvGeom, Vec<usize>)> {
    let (batch, c_in, h, wd, batched) = match *x {
        [n, c, h, w] => (n, c, h, w, true),
        [c, h, w] => (1, c, h, w, false),
        _ => return Err(Error::shape(format!("conv2d: input shape {x:?}"))),
    };
    let [c_out, wc_in, k, k2] = *w else {
        return Err(Error::shape(format!("conv2d: weight shape {w:?}")));
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels, weight expects {wc_in}"
        )));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!("conv2d: kernel must be square and odd, got {k}×{k2}")));
    }
    if b != [c_out] {
        return Err(Error::shape(format!("conv2d: bias {b:?} for {c_out} outputs")));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::config(format!("conv2d: stride must be 1 or 2, got {stride}")));
    }
    let g = ConvGeom {
        batch,
        c_in,
        c_out,
        h,
        w: wd,
        k,
        stride,
    };
    let shape = if batched {
        vec![batch, c_out, g.h_out(), g.w_out()]
    } else {
        vec![c_out, g.h_out(), g.w_out()]
    };
    Ok((g, shape))
}

struct AttnDims {
    b: usize,
    m: usize,
    n: usize,
    d: usize,
    dv: usize,
}

fn attention_dims(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttnDims> {
    let split = |s: &[usize]| -> Result<(usize, usize, usize)> {
        match *s {
            [r, c] => Ok((1, r, c)),
            [b, r, c] => Ok((b, r, c)),
            _ => Err(Error::shape(format!("attention: unsupported rank in {s:?}"))),
        }
    };
    let (bq, m, d) = split(q)?;
    let (bk, n, dk) = split(k)?;
    let (bv, nv, dv) = split(v)?;
    if n == 0 || nv == 0 {
        return Err(Error::EmptyKeySet);
    }
    if bq != bk || bk != bv || d != dk || n != nv || q.len() != k.len() || k.len() != v.len() {
        return Err(Error::shape(format!(
            "attention: q {q:?}, k {k:?}, v {v:?} are incompatible"
        )));
    }
    Ok(AttnDims { b: bq, m, n, d, dv })
}

/// Unrecorded conv2d for frozen feature extraction.
pub fn conv2d_plain<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
) -> Result<Tensor<S>> {
    let (g, shape) = conv_geometry(x.shape(), weight.shape(), bias.shape(), stride)?;
    Ok(Tensor::from_parts(
        shape,
        kernels::conv2d_forward(x.data(), weight.data(), bias.data(), &g),
    ))
}

/// Unrecorded single-group attention `softmax(QKᵀ/√d)·V`.
pub fn scaled_dot_attention<S: Real>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    let AttnDims { b, m, n, d, dv } = attention_dims(q.shape(), k.shape(), v.shape())?;
    let (out, _) = kernels::attention_forward(q.data(), k.data(), v.data(), b, m, n, d, dv);
    let mut shape = q.shape().to_vec();
    *shape.last_mut().expect("rank ≥ 2") = dv;
    Ok(Tensor::from_parts(shape, out))
}
