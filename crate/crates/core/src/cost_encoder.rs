//! The pretrainable cost-volume encoder: masked cost-map tokenization, latent
//! projection by cross-attention, and alternate-group aggregation.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Init, ParamId, Session, Var};
use crate::error::{Error, Result};
use crate::masking::{MaskGrid, MaskPyramid, BASE_CELL};
use crate::nn::{grid_pe, Conv, Linear, TransformerLayer};
use crate::tensor::{Real, Tensor};

/// Width of the cost-encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostEncoderDims {
    /// Channels of the patchified cost features `F³`.
    pub cost_dim: usize,
    /// Latent tokens per source pixel.
    pub num_latents: usize,
    /// Latent token width.
    pub token_dim: usize,
    /// Number of (intra, inter) aggregation layer pairs.
    pub agt_pairs: usize,
    /// Hidden width of the transformer feed-forward blocks.
    pub ffn_hidden: usize,
}

/// One layer pair of the alternate-group transformer.
#[derive(Clone, Debug)]
pub struct AgtPair {
    /// Attention among the latent tokens of each source pixel.
    pub intra: TransformerLayer,
    /// Attention among source pixels sharing a latent index, along rows (even
    /// pairs) or columns (odd pairs).
    pub inter: TransformerLayer,
}

#[derive(Clone, Debug)]
pub struct CostEncoder {
    pub dims: CostEncoderDims,
    pub convs: Vec<Conv>,
    pub latents: ParamId,
    pub key: Linear,
    pub value: Linear,
    pub agt: Vec<AgtPair>,
}

impl CostEncoder {
    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, prefix: &str, dims: CostEncoderDims) -> Self {
        assert!(dims.cost_dim % 4 == 0, "cost_dim must be a multiple of 4");
        assert!(dims.token_dim % 4 == 0, "token_dim must be a multiple of 4");
        let mut sub = init.sub(prefix);
        let widths = [dims.cost_dim / 2, dims.cost_dim, dims.cost_dim];
        let mut c_in = 1;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = Conv::new(&mut sub, &format!("patchify{i}"), c_in, c_out, 2);
                c_in = c_out;
                conv
            })
            .collect();
        let latents = sub.normal("latents", &[dims.num_latents, dims.token_dim], 1.0);
        let key = Linear::new(&mut sub, "latent_key", dims.cost_dim, dims.token_dim, 1.0);
        let value = Linear::new(&mut sub, "latent_value", dims.cost_dim, dims.token_dim, 1.0);
        let agt = (0..dims.agt_pairs)
            .map(|i| AgtPair {
                intra: TransformerLayer::new(&mut sub, &format!("agt{i}.intra"), dims.token_dim, dims.ffn_hidden),
                inter: TransformerLayer::new(&mut sub, &format!("agt{i}.inter"), dims.token_dim, dims.ffn_hidden),
            })
            .collect();
        CostEncoder {
            dims,
            convs,
            latents,
            key,
            value,
            agt,
        }
    }

    /// Channels of the features that each mask level multiplies.
    fn level_channels(&self) -> [usize; 3] {
        [1, self.convs[0].c_out, self.convs[1].c_out]
    }

    /// `F^{i+1} = Conv_stride2(ReLU(F^i ⊙ M^i))` for `i = 0, 1, 2`, over cost
    /// maps `[P, 1, Hc, Wc]`. With `pyramids = None` every mask is all ones and
    /// the multiplication is skipped. Returns `F³` of shape `[P, D_f, Hc/8, Wc/8]`.
    pub fn masked_patchify<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        maps: Var,
        pyramids: Option<&[&MaskPyramid]>,
    ) -> Result<Var> {
        let shape = s.shape(maps).to_vec();
        let [p, 1, hc, wc] = shape[..] else {
            return Err(Error::shape(format!("cost maps must be [P,1,Hc,Wc], got {shape:?}")));
        };
        if hc % BASE_CELL != 0 || wc % BASE_CELL != 0 {
            return Err(Error::shape(format!(
                "cost map {hc}×{wc} is not divisible by {BASE_CELL}"
            )));
        }
        if let Some(pyr) = pyramids {
            if pyr.len() != p {
                return Err(Error::shape(format!("{} mask pyramids for {p} cost maps", pyr.len())));
            }
            if let Some(bad) = pyr.iter().find(|m| m.full().height != hc || m.full().width != wc) {
                return Err(Error::shape(format!(
                    "mask {}×{} does not match cost map {hc}×{wc}",
                    bad.full().height,
                    bad.full().width
                )));
            }
        }
        let channels = self.level_channels();
        let mut x = maps;
        for (level, conv) in self.convs.iter().enumerate() {
            if let Some(pyr) = pyramids {
                let grids: Vec<&MaskGrid> = pyr.iter().map(|m| &m.levels[level]).collect();
                let mask = s.constant(expand_masks(&grids, channels[level]));
                x = s.mul(x, mask)?;
            }
            x = s.relu(x)?;
            x = conv.forward(s, x)?;
        }
        Ok(x)
    }

    /// Cross-attends the K learned queries over the visible `F³` tokens of each
    /// source pixel (tokens carry 2-D positional encodings). Input `[P, D_f, h, w]`,
    /// output `[P, K, D_t]`. All pixels must have the same number of visible
    /// tokens.
    pub fn project_latent<S: Real>(&self, s: &mut Session<'_, S>, f3: Var, base: Option<&[&MaskGrid]>) -> Result<Var> {
        let shape = s.shape(f3).to_vec();
        let [p, d, h, w] = shape[..] else {
            return Err(Error::shape(format!("F³ must be [P,D,h,w], got {shape:?}")));
        };
        let t = s.reshape(f3, &[p, d, h * w])?;
        let t = s.permute(t, &[0, 2, 1])?;
        let pe = s.constant(grid_pe(h, w, d));
        let mut tokens = s.add_bcast(t, pe)?;
        if let Some(masks) = base {
            if masks.len() != p {
                return Err(Error::shape(format!("{} base masks for {p} pixels", masks.len())));
            }
            let index: Vec<Vec<usize>> = masks.iter().map(|m| m.visible_indices()).collect();
            if let Some(px) = index.iter().position(Vec::is_empty) {
                return Err(Error::AllTokensMasked(px));
            }
            if masks.iter().any(|m| m.visible.len() != h * w) {
                return Err(Error::shape(format!("base masks do not cover the {h}×{w} token grid")));
            }
            if index.iter().any(|r| r.len() != index[0].len()) {
                return Err(Error::shape("visible token counts differ between source pixels"));
            }
            tokens = s.gather_rows(tokens, Arc::new(index))?;
        }
        let k = self.key.forward(s, tokens)?;
        let v = self.value.forward(s, tokens)?;
        let q = s.param(self.latents);
        let q = s.repeat_leading(q, p)?;
        let a = s.attention(q, k, v)?;
        s.add(a, q)
    }

    /// Alternate-group aggregation over memory `[B·H·W, K, D_t]` laid out
    /// row-major over `(batch, row, col)`. Shape-preserving.
    pub fn agt_encode<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        memory: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let (k, d) = (self.dims.num_latents, self.dims.token_dim);
        if s.shape(memory) != [batch * height * width, k, d] {
            return Err(Error::shape(format!(
                "cost memory {:?} does not match [{}, {k}, {d}]",
                s.shape(memory),
                batch * height * width
            )));
        }
        let mut x = memory;
        for (i, pair) in self.agt.iter().enumerate() {
            x = pair.intra.forward(s, x)?;
            let grid = s.reshape(x, &[batch, height, width, k, d])?;
            let (axes, inverse, groups, len) = if i % 2 == 0 {
                ([0, 1, 3, 2, 4], [0, 1, 3, 2, 4], batch * height * k, width)
            } else {
                ([0, 2, 3, 1, 4], [0, 3, 1, 2, 4], batch * width * k, height)
            };
            let g = s.permute(grid, &axes)?;
            let permuted = s.shape(g).to_vec();
            let g = s.reshape(g, &[groups, len, d])?;
            let g = pair.inter.forward(s, g)?;
            let g = s.reshape(g, &permuted)?;
            let g = s.permute(g, &inverse)?;
            x = s.reshape(g, &[batch * height * width, k, d])?;
        }
        Ok(x)
    }

    /// Full encoder: cost maps `[B·Hs·Ws, 1, Hc, Wc]` → cost memory
    /// `[B·Hs·Ws, K, D_t]`. Source-pixel positional encodings are added to the
    /// latent tokens before aggregation.
    pub fn encode<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        maps: Var,
        batch: usize,
        source: (usize, usize),
        pyramids: Option<&[&MaskPyramid]>,
    ) -> Result<Var> {
        let f3 = self.masked_patchify(s, maps, pyramids)?;
        let base: Option<Vec<&MaskGrid>> = pyramids.map(|p| p.iter().map(|m| m.base()).collect());
        let latent = self.project_latent(s, f3, base.as_deref())?;
        let pe = source_pe::<S>(batch, source, self.dims.num_latents, self.dims.token_dim);
        let pe = s.constant(pe);
        let latent = s.add(latent, pe)?;
        self.agt_encode(s, latent, batch, source.0, source.1)
    }
}

/// Source-pixel encodings broadcast over the batch and the latent index:
/// `[B·H·W, K, D]`.
fn source_pe<S: Real>(batch: usize, (h, w): (usize, usize), k: usize, d: usize) -> Tensor<S> {
    let grid = grid_pe::<S>(h, w, d);
    let mut data = Vec::with_capacity(batch * h * w * k * d);
    for _ in 0..batch {
        for row in grid.data().chunks(d) {
            for _ in 0..k {
                data.extend_from_slice(row);
            }
        }
    }
    Tensor::new(&[batch * h * w, k, d], data).expect("sizes agree")
}

/// Stacks per-pixel masks as `[P, C, h, w]` with 1 for visible cells.
fn expand_masks<S: Real>(grids: &[&MaskGrid], channels: usize) -> Tensor<S> {
    let (h, w) = (grids[0].height, grids[0].width);
    let mut data = Vec::with_capacity(grids.len() * channels * h * w);
    for g in grids {
        let plane: Vec<S> = g.visible.iter().map(|&v| if v { S::one() } else { S::zero() }).collect();
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
    }
    Tensor::new(&[grids.len(), channels, h, w], data).expect("sizes agree")
}
