//! Cross-attention cost decoding, the reconstruction pre-text head and loss,
//! and the recurrent flow updater.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Init, Session, Var};
use crate::error::{Error, Result};
use crate::nn::{points_pe, Ffn, Linear};
use crate::tensor::{Real, Tensor};

/// Side of the query patch cropped around the decoding location.
pub const QUERY_PATCH: usize = 9;
/// Side of the reconstruction target patch.
pub const TARGET_PATCH: usize = 15;
/// Guard added to the patch standard deviation before dividing.
pub const STANDARDIZE_EPS: f64 = 1e-6;

/// What the decoder query is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// Positional encoding of the location only.
    PeOnly,
    /// Positional encoding plus the encoded 9×9 cost patch at the location.
    PePlusPatch,
}

/// Where pre-text locations come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocationMode {
    /// Always the cost-map center.
    Fixed,
    /// Uniform over the cost map.
    Random,
    /// `x + f(x)` from the current flow (finetuning).
    FlowPredicted,
}

/// Which side of the reconstruction loss is standardized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeSide {
    Target,
    Prediction,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(format!(
                        "expected one of {}, got {s:?}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

text_enum!(QueryMode { PeOnly => "pe_only", PePlusPatch => "pe_plus_patch" });
text_enum!(LocationMode { Fixed => "fixed", Random => "random", FlowPredicted => "flow_predicted" });
text_enum!(NormalizeSide { Target => "target", Prediction => "prediction" });

/// Cross-attention decoder: `Q = FFN(FFN(q) + PE(p))`, `K = FFN(T)`, `V = FFN(T)`,
/// one attention query per source pixel.
#[derive(Clone, Debug)]
pub struct CostDecoder {
    pub patch_ffn: Ffn,
    pub query_ffn: Ffn,
    pub key_ffn: Ffn,
    pub value_ffn: Ffn,
    pub token_dim: usize,
}

impl CostDecoder {
    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, prefix: &str, token_dim: usize, hidden: usize) -> Self {
        let mut sub = init.sub(prefix);
        let patch = QUERY_PATCH * QUERY_PATCH;
        CostDecoder {
            patch_ffn: Ffn::new(&mut sub, "patch_ffn", patch, hidden, token_dim),
            query_ffn: Ffn::new(&mut sub, "query_ffn", token_dim, hidden, token_dim),
            key_ffn: Ffn::new(&mut sub, "key_ffn", token_dim, hidden, token_dim),
            value_ffn: Ffn::new(&mut sub, "value_ffn", token_dim, hidden, token_dim),
            token_dim,
        }
    }

    /// Decodes one cost feature per source pixel from memory `[P, K, D_t]`,
    /// query patches `[P, 81]` and locations `(y, x)` in cost-map units.
    pub fn decode_cost_feature<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        memory: Var,
        patches: Option<Var>,
        locations: &[(f64, f64)],
        mode: QueryMode,
    ) -> Result<Var> {
        Ok(self.decode_with_patch(s, memory, patches, locations, mode)?.0)
    }

    /// [`Self::decode_cost_feature`] that also returns the patch encoding
    /// `FFN(q)` `[P, D_t]` (absent in pe_only mode).
    pub fn decode_with_patch<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        memory: Var,
        patches: Option<Var>,
        locations: &[(f64, f64)],
        mode: QueryMode,
    ) -> Result<(Var, Option<Var>)> {
        let p = locations.len();
        let d = self.token_dim;
        let pe = s.constant(points_pe(locations, d));
        let (q, enc) = match (mode, patches) {
            (QueryMode::PeOnly, _) => (pe, None),
            (QueryMode::PePlusPatch, Some(patch)) => {
                let enc = self.patch_ffn.forward(s, patch)?;
                (s.add(enc, pe)?, Some(enc))
            }
            (QueryMode::PePlusPatch, None) => {
                return Err(Error::config("query mode pe_plus_patch needs a query patch"));
            }
        };
        let q = self.query_ffn.forward(s, q)?;
        let q = s.reshape(q, &[p, 1, d])?;
        let k = self.key_ffn.forward(s, memory)?;
        let v = self.value_ffn.forward(s, memory)?;
        let c = s.attention(q, k, v)?;
        Ok((s.reshape(c, &[p, d])?, enc))
    }
}

/// A pre-text location in cost-map units: the center in fixed mode, uniform
/// over `[0, Hc−1] × [0, Wc−1]` otherwise.
pub fn sample_pretext_location<R: Rng>(rng: &mut R, hc: usize, wc: usize, mode: LocationMode) -> (f64, f64) {
    let (ymax, xmax) = ((hc - 1) as f64, (wc - 1) as f64);
    match mode {
        LocationMode::Fixed => (ymax / 2.0, xmax / 2.0),
        LocationMode::Random | LocationMode::FlowPredicted => {
            (rng.random::<f64>() * ymax, rng.random::<f64>() * xmax)
        }
    }
}

/// Two-layer MLP predicting the 15×15 target patch from a cost feature.
#[derive(Clone, Debug)]
pub struct PretextHead {
    pub mlp: Ffn,
}

impl PretextHead {
    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, prefix: &str, token_dim: usize, hidden: usize) -> Self {
        PretextHead {
            mlp: Ffn::new(init, prefix, token_dim, hidden, TARGET_PATCH * TARGET_PATCH),
        }
    }

    /// `[P, D_t]` → `[P, 225]`.
    pub fn pretext_predict<S: Real>(&self, s: &mut Session<'_, S>, c: Var) -> Result<Var> {
        self.mlp.forward(s, c)
    }
}

/// Reconstruction target with its per-patch standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextTarget<S: Real = f32> {
    pub raw: Tensor<S>,
    pub standardized: Tensor<S>,
    pub mean: S,
    pub std: S,
}

impl<S: Real> PretextTarget<S> {
    /// `standardized = (raw − mean) / (std + 1e−6)` with population std.
    pub fn new(raw: Tensor<S>) -> Self {
        let (y, stds, _) =
            crate::autodiff::kernels::standardize_rows(raw.data(), raw.len(), S::c(STANDARDIZE_EPS));
        let mean = raw.sum() / S::c(raw.len() as f64);
        PretextTarget {
            standardized: Tensor::new(raw.shape(), y).expect("same shape"),
            mean,
            std: stds[0],
            raw,
        }
    }
}

/// `(1/|Ω|) Σ_x mean((pred_x − target_x)²)` over predictions `[|Ω|, 225]`.
/// With [`NormalizeSide::Prediction`] the prediction is standardized and
/// compared to the raw target instead.
pub fn pretext_loss<S: Real>(
    s: &mut Session<'_, S>,
    pred: Var,
    targets: &[PretextTarget<S>],
    side: NormalizeSide,
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::config("pre-text loss over an empty pixel set"));
    }
    let width = TARGET_PATCH * TARGET_PATCH;
    if s.shape(pred) != [targets.len(), width] {
        return Err(Error::shape(format!(
            "pre-text prediction {:?} for {} targets",
            s.shape(pred),
            targets.len()
        )));
    }
    let mut data = Vec::with_capacity(targets.len() * width);
    for t in targets {
        data.extend_from_slice(match side {
            NormalizeSide::Target => t.standardized.data(),
            NormalizeSide::Prediction => t.raw.data(),
        });
    }
    let target = s.constant(Tensor::new(&[targets.len(), width], data)?);
    let pred = match side {
        NormalizeSide::Target => pred,
        NormalizeSide::Prediction => s.standardize(pred, STANDARDIZE_EPS)?,
    };
    s.mse(pred, target)
}

/// Gated recurrent flow updater with a zero-initialized Δflow head. Besides
/// the retrieved cost feature it sees the encoding of the local cost patch,
/// which carries the direct evidence of where the current match lies.
#[derive(Clone, Debug)]
pub struct FlowUpdater {
    pub flow_encoder: Linear,
    pub update_gate: Linear,
    pub reset_gate: Linear,
    pub candidate: Linear,
    pub head_hidden: Linear,
    pub head_out: Linear,
    pub hidden_dim: usize,
}

impl FlowUpdater {
    pub fn new<S: Real, R: Rng>(
        init: &mut Init<'_, S, R>,
        prefix: &str,
        token_dim: usize,
        context_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let mut sub = init.sub(prefix);
        let flow_dim = token_dim.min(32).max(4);
        let input = 2 * token_dim + context_dim + flow_dim;
        FlowUpdater {
            flow_encoder: Linear::new(&mut sub, "flow_encoder", 2, flow_dim, 1.0),
            update_gate: Linear::new(&mut sub, "update_gate", hidden_dim + input, hidden_dim, 1.0),
            reset_gate: Linear::new(&mut sub, "reset_gate", hidden_dim + input, hidden_dim, 1.0),
            candidate: Linear::new(&mut sub, "candidate", hidden_dim + input, hidden_dim, 1.0),
            head_hidden: Linear::new(&mut sub, "head_hidden", hidden_dim, hidden_dim, 2f64.sqrt()),
            head_out: Linear::zeroed(&mut sub, "head_out", hidden_dim, 2),
            hidden_dim,
        }
    }

    /// One GRU step on `[P, ·]` rows; `local` is the patch encoding
    /// `[P, D_t]`. Returns `(hidden', Δflow)`.
    pub fn flow_update_step<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        hidden: Var,
        c: Var,
        local: Var,
        ctx: Var,
        flow: Var,
    ) -> Result<(Var, Var)> {
        let f = self.flow_encoder.forward(s, flow)?;
        let x = s.concat_last(&[c, local, ctx, f])?;
        let hx = s.concat_last(&[hidden, x])?;
        let z = self.update_gate.forward(s, hx)?;
        let z = s.sigmoid(z)?;
        let r = self.reset_gate.forward(s, hx)?;
        let r = s.sigmoid(r)?;
        let rh = s.mul(r, hidden)?;
        let rhx = s.concat_last(&[rh, x])?;
        let cand = self.candidate.forward(s, rhx)?;
        let cand = s.tanh(cand)?;
        // h' = h + z ⊙ (h̃ − h)
        let diff = s.sub(cand, hidden)?;
        let step = s.mul(z, diff)?;
        let next = s.add(hidden, step)?;
        let d = self.head_hidden.forward(s, next)?;
        let d = s.relu(d)?;
        let delta = self.head_out.forward(s, d)?;
        Ok((next, delta))
    }
}

/// Inputs of the recurrent decoder for `P = B·H·W` source pixels.
pub struct RecurrentInputs<'t, S: Real> {
    pub memory: Var,
    /// Raw cost maps `[P, Hc, Wc]`.
    pub maps: &'t Tensor<S>,
    /// Context features `[P, D_ctx]`.
    pub context: Var,
    pub batch: usize,
    /// Source grid `(H, W)`; cost maps share this grid.
    pub grid: (usize, usize),
}

/// Runs `n_iters` decode/update steps from zero flow. Each iteration crops a
/// 9×9 patch at `p = x + f(x)` from the raw cost map, decodes it against the
/// cost memory and applies one GRU update. Returns every intermediate flow
/// `[P, 2]` (channel 0 horizontal, channel 1 vertical, grid units).
pub fn run_recurrent_decoder<S: Real>(
    s: &mut Session<'_, S>,
    decoder: &CostDecoder,
    updater: &FlowUpdater,
    inputs: &RecurrentInputs<'_, S>,
    n_iters: usize,
) -> Result<Vec<Var>> {
    if n_iters == 0 {
        return Err(Error::config("recurrent decoder needs at least one iteration"));
    }
    let (h, w) = inputs.grid;
    let p = inputs.batch * h * w;
    if inputs.maps.shape() != [p, h, w] {
        return Err(Error::shape(format!(
            "cost maps {:?} for {p} pixels on a {h}×{w} grid",
            inputs.maps.shape()
        )));
    }
    let maps = s.constant(inputs.maps.clone());
    let mut hidden = s.constant(Tensor::zeros(&[p, updater.hidden_dim]));
    let mut flow = s.constant(Tensor::zeros(&[p, 2]));
    let mut flows = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let centers = lookup_centers(s.value(flow), inputs.grid);
        let patches = s.crop_patches(maps, Arc::new(centers.clone()), QUERY_PATCH)?;
        let (c, local) =
            decoder.decode_with_patch(s, inputs.memory, Some(patches), &centers, QueryMode::PePlusPatch)?;
        let local = local.expect("pe_plus_patch encodes the patch");
        let (next, delta) = updater.flow_update_step(s, hidden, c, local, inputs.context, flow)?;
        hidden = next;
        flow = s.add(flow, delta)?;
        flows.push(flow);
    }
    Ok(flows)
}

/// Corresponding locations `p = x + f(x)` as `(y, x)` for flows `[P, 2]` over
/// a batch of `(H, W)` grids.
pub fn lookup_centers<S: Real>(flow: &Tensor<S>, (h, w): (usize, usize)) -> Vec<(f64, f64)> {
    flow.data()
        .chunks(2)
        .enumerate()
        .map(|(i, uv)| {
            let cell = i % (h * w);
            let (row, col) = ((cell / w) as f64, (cell % w) as f64);
            (row + uv[1].f64(), col + uv[0].f64())
        })
        .collect()
}

/// `Σ_i γ^{N−1−i} · mean|f_i − f_gt|` over the iteration outputs.
pub fn sequence_loss<S: Real>(s: &mut Session<'_, S>, flows: &[Var], gt: Var, gamma: f64) -> Result<Var> {
    let n = flows.len();
    let mut total: Option<Var> = None;
    for (i, &f) in flows.iter().enumerate() {
        let d = s.sub(f, gt)?;
        let l = s.mean_abs(d)?;
        let l = s.scale(l, gamma.powi((n - 1 - i) as i32))?;
        total = Some(match total {
            Some(t) => s.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::config("sequence loss over no iterations"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::rng::rng_for;

    #[test]
    fn fixed_location_is_center() {
        let mut rng = rng_for(0, &[]);
        assert_eq!(sample_pretext_location(&mut rng, 32, 32, LocationMode::Fixed), (15.5, 15.5));
    }

    #[test]
    fn random_locations_in_range_and_reproducible() {
        let mut a = rng_for(9, &[]);
        let mut b = rng_for(9, &[]);
        for _ in 0..10_000 {
            let p = sample_pretext_location(&mut a, 16, 12, LocationMode::Random);
            assert!((0.0..=15.0).contains(&p.0) && (0.0..=11.0).contains(&p.1));
            assert_eq!(p, sample_pretext_location(&mut b, 16, 12, LocationMode::Random));
        }
    }

    #[test]
    fn standardized_target_statistics() {
        let raw = Tensor::<f64>::new(&[15, 15], (0..225).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.0).collect()).unwrap();
        let t = PretextTarget::new(raw);
        let n = 225.0;
        let mean = t.standardized.sum() / n;
        let var = t.standardized.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
        let flat = PretextTarget::new(Tensor::<f64>::full(&[15, 15], 2.5));
        assert!(flat.standardized.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_cases() {
        let store = ParamStore::<f64>::new();
        let mut rng = rng_for(1, &[]);
        let raw = Tensor::new(&[15, 15], (0..225).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = PretextTarget::new(raw);
        let mut s = Session::new(&store);

        let exact = s.constant(t.standardized.reshape(&[1, 225]).unwrap());
        let l = pretext_loss(&mut s, exact, std::slice::from_ref(&t), NormalizeSide::Target).unwrap();
        assert_eq!(s.value(l).item(), 0.0);

        let zeros = s.constant(Tensor::zeros(&[1, 225]));
        let l = pretext_loss(&mut s, zeros, std::slice::from_ref(&t), NormalizeSide::Target).unwrap();
        let expected = t.standardized.data().iter().map(|v| v * v).sum::<f64>() / 225.0;
        assert!((s.value(l).item() - expected).abs() < 1e-12);

        let flat = PretextTarget::new(Tensor::<f64>::full(&[15, 15], 4.0));
        let pred = Tensor::new(&[1, 225], (0..225).map(|i| i as f64 / 100.0).collect()).unwrap();
        let expected = pred.data().iter().map(|v| v * v).sum::<f64>() / 225.0;
        let pv = s.constant(pred);
        let l = pretext_loss(&mut s, pv, &[flat], NormalizeSide::Target).unwrap();
        assert!((s.value(l).item() - expected).abs() < 1e-12);

        assert!(matches!(
            pretext_loss(&mut s, zeros, &[], NormalizeSide::Target),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_head_keeps_flow_and_patches_start_at_source() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(2, &[]);
        let mut init = Init::new(&mut store, &mut rng, "");
        let dec = CostDecoder::new(&mut init, "decoder", 8, 16);
        let upd = FlowUpdater::new(&mut init, "flow_updater", 8, 4, 8);
        let mut s = Session::new(&store);
        let (h, w, k) = (3, 4, 2);
        let memory = s.constant(Tensor::new(&[h * w, k, 8], (0..h * w * k * 8).map(|i| (i as f64).cos()).collect()).unwrap());
        let context = s.constant(Tensor::ones(&[h * w, 4]));
        let maps = Tensor::new(&[h * w, h, w], (0..h * w * h * w).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let inputs = RecurrentInputs {
            memory,
            maps: &maps,
            context,
            batch: 1,
            grid: (h, w),
        };
        let flows = run_recurrent_decoder(&mut s, &dec, &upd, &inputs, 1).unwrap();
        assert!(s.value(flows[0]).data().iter().all(|&v| v == 0.0));
        // zero initial flow puts the first crop at p = x
        let centers = lookup_centers(&Tensor::<f64>::zeros(&[h * w, 2]), (h, w));
        assert_eq!(centers[5], (1.0, 1.0));
        let moved = lookup_centers(&Tensor::<f64>::from_f64(&[1, 2], &[0.5, -1.0]).unwrap(), (1, 1));
        assert_eq!(moved[0], (-1.0, 0.5));
        assert!(run_recurrent_decoder(&mut s, &dec, &upd, &inputs, 0).is_err());
    }

    #[test]
    fn pe_plus_patch_requires_patch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(3, &[]);
        let mut init = Init::new(&mut store, &mut rng, "");
        let dec = CostDecoder::new(&mut init, "decoder", 8, 16);
        let mut s = Session::new(&store);
        let memory = s.constant(Tensor::ones(&[1, 2, 8]));
        let err = dec
            .decode_cost_feature(&mut s, memory, None, &[(0.0, 0.0)], QueryMode::PePlusPatch)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
