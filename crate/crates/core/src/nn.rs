//! Parameterized layers built on the tape ops.

use rand::Rng;

use crate::autodiff::{Init, ParamId, ParamStore, Session, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Fan-in scaled normal init (`gain²/fan_in` variance).
    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, name: &str, d_in: usize, d_out: usize, gain: f64) -> Self {
        let mut sub = init.sub(name);
        let weight = sub.normal("weight", &[d_in, d_out], gain / (d_in as f64).sqrt());
        let bias = sub.constant("bias", &[d_out], 0.0);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn zeroed<S: Real, R: Rng>(init: &mut Init<'_, S, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut sub = init.sub(name);
        let weight = sub.constant("weight", &[d_in, d_out], 0.0);
        let bias = sub.constant("bias", &[d_out], 0.0);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.linear(x, w, Some(b))
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub first: Linear,
    pub second: Linear,
}

impl Ffn {
    pub fn new<S: Real, R: Rng>(
        init: &mut Init<'_, S, R>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        let mut sub = init.sub(name);
        Ffn {
            first: Linear::new(&mut sub, "fc1", d_in, hidden, 2f64.sqrt()),
            second: Linear::new(&mut sub, "fc2", hidden, d_out, 1.0),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = s.relu(h)?;
        self.second.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, name: &str, dim: usize) -> Self {
        let mut sub = init.sub(name);
        LayerNorm {
            gamma: sub.constant("gamma", &[dim], 1.0),
            beta: sub.constant("beta", &[dim], 0.0),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.layer_norm(x, g, b, Self::EPS)
    }
}

/// 3×3 "same" convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub const KERNEL: usize = 3;

    pub fn new<S: Real, R: Rng>(
        init: &mut Init<'_, S, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let k = Self::KERNEL;
        let mut sub = init.sub(name);
        let fan_in = (c_in * k * k) as f64;
        Conv {
            weight: sub.normal("weight", &[c_out, c_in, k, k], (2.0 / fan_in).sqrt()),
            bias: sub.constant("bias", &[c_out], 0.0),
            stride,
            c_in,
            c_out,
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.conv2d(x, w, b, self.stride)
    }

    pub fn forward_plain<S: Real>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        crate::autodiff::conv2d_plain(x, store.get(self.weight), store.get(self.bias), self.stride)
    }
}

/// Single-head self-attention over groups `[G, T, D]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, name: &str, dim: usize) -> Self {
        let mut sub = init.sub(name);
        SelfAttention {
            query: Linear::new(&mut sub, "query", dim, dim, 1.0),
            key: Linear::new(&mut sub, "key", dim, dim, 1.0),
            value: Linear::new(&mut sub, "value", dim, dim, 1.0),
            out: Linear::new(&mut sub, "out", dim, dim, 1.0),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let v = self.value.forward(s, x)?;
        let a = s.attention(q, k, v)?;
        self.out.forward(s, a)
    }
}

/// Pre-norm transformer layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerLayer {
    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, name: &str, dim: usize, hidden: usize) -> Self {
        let mut sub = init.sub(name);
        TransformerLayer {
            norm1: LayerNorm::new(&mut sub, "norm1", dim),
            attn: SelfAttention::new(&mut sub, "attn", dim),
            norm2: LayerNorm::new(&mut sub, "norm2", dim),
            ffn: Ffn::new(&mut sub, "ffn", dim, hidden, dim),
        }
    }

    /// `x` has shape `[G, T, D]`; attention runs within each group.
    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let h = self.attn.forward(s, h)?;
        let x = s.add(x, h)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.ffn.forward(s, h)?;
        s.add(x, h)
    }
}

const PE_TEMPERATURE: f64 = 100.0;

/// Fixed 2-D sinusoidal encoding of a continuous `(y, x)` location. The first
/// half of the channels encodes `y`, the second half `x`; `dim` must be a
/// multiple of 4.
pub fn sinusoidal_pe(y: f64, x: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 4 == 0 && dim > 0, "positional encoding dim {dim} must be a multiple of 4");
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [y, x] {
        for i in 0..quarter {
            let freq = PE_TEMPERATURE.powf(-(i as f64) / quarter as f64);
            out.push((coord * freq).sin());
            out.push((coord * freq).cos());
        }
    }
    out
}

/// Encodings for every cell of an `h×w` grid, shape `[h*w, dim]`.
pub fn grid_pe<S: Real>(h: usize, w: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(h * w * dim);
    for i in 0..h {
        for j in 0..w {
            data.extend(sinusoidal_pe(i as f64, j as f64, dim).into_iter().map(S::c));
        }
    }
    Tensor::from_parts(vec![h * w, dim], data)
}

/// Encodings for a list of continuous locations, shape `[n, dim]`.
pub fn points_pe<S: Real>(points: &[(f64, f64)], dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(points.len() * dim);
    for &(y, x) in points {
        data.extend(sinusoidal_pe(y, x, dim).into_iter().map(S::c));
    }
    Tensor::from_parts(vec![points.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_is_bounded_and_distinguishes_positions() {
        let a = sinusoidal_pe(0.0, 0.0, 16);
        let b = sinusoidal_pe(1.0, 0.0, 16);
        assert_eq!(a.len(), 16);
        assert!(a.iter().chain(&b).all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        assert_eq!(&a[8..], &b[8..]);
    }
}
