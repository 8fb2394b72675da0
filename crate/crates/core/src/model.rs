//! The assembled network: frozen image encoder, context encoder, cost encoder,
//! cost decoder, pre-text head and flow updater, with their shared forward passes.

use rand::Rng;

use crate::autodiff::{kernels, Init, ParamStore, Session, Var};
use crate::cost_encoder::{CostEncoder, CostEncoderDims};
use crate::costvol::{build_cost_volume, CostVolume};
use crate::decoder::{
    pretext_loss, run_recurrent_decoder, sample_pretext_location, sequence_loss, CostDecoder, FlowUpdater,
    LocationMode, NormalizeSide, PretextHead, PretextTarget, QueryMode, RecurrentInputs, QUERY_PATCH, TARGET_PATCH,
};
use crate::encoders::{encode_image, EncoderWeights, STRIDE_TO_IMAGE};
use crate::error::{Error, Result};
use crate::masking::{MaskPyramid, MaskPyramidSet};
use crate::rng::rng_for;
use crate::tensor::{Real, Tensor};

pub const IMAGE_ENCODER: &str = "image_encoder";
pub const CONTEXT_ENCODER: &str = "context_encoder";
pub const COST_ENCODER: &str = "cost_encoder";
pub const DECODER: &str = "decoder";
pub const PRETEXT_HEAD: &str = "pretext_head";
pub const FLOW_UPDATER: &str = "flow_updater";

/// Network widths and initialization seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Image feature channels `D`.
    pub feature_dim: usize,
    /// Context feature channels `D_ctx`.
    pub context_dim: usize,
    /// Patchified cost feature channels `D_f`.
    pub cost_dim: usize,
    /// Latent tokens per source pixel `K`.
    pub num_latents: usize,
    /// Latent token width `D_t`.
    pub token_dim: usize,
    pub agt_pairs: usize,
    /// Hidden width of transformer and decoder feed-forward blocks.
    pub ffn_hidden: usize,
    /// Hidden width of the pre-text prediction head.
    pub head_hidden: usize,
    /// Hidden state width of the flow updater.
    pub gru_hidden: usize,
    /// Seed of the image and context encoders, shared by every run so that all
    /// runs see the same cost volumes.
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            context_dim: 32,
            cost_dim: 64,
            num_latents: 8,
            token_dim: 64,
            agt_pairs: 2,
            ffn_hidden: 128,
            head_hidden: 256,
            gru_hidden: 64,
            encoder_seed: 1234,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.feature_dim", self.feature_dim),
            ("model.context_dim", self.context_dim),
            ("model.num_latents", self.num_latents),
            ("model.ffn_hidden", self.ffn_hidden),
            ("model.head_hidden", self.head_hidden),
            ("model.gru_hidden", self.gru_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{key} must be positive")));
            }
        }
        if self.feature_dim < 2 || self.context_dim < 2 {
            return Err(Error::config("encoder widths must be at least 2"));
        }
        for (key, v) in [("model.cost_dim", self.cost_dim), ("model.token_dim", self.token_dim)] {
            if v == 0 || v % 4 != 0 {
                return Err(Error::config(format!("{key} must be a positive multiple of 4, got {v}")));
            }
        }
        Ok(())
    }

    fn cost_encoder_dims(&self) -> CostEncoderDims {
        CostEncoderDims {
            cost_dim: self.cost_dim,
            num_latents: self.num_latents,
            token_dim: self.token_dim,
            agt_pairs: self.agt_pairs,
            ffn_hidden: self.ffn_hidden,
        }
    }
}

/// Layer handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub image_encoder: EncoderWeights,
    pub context_encoder: EncoderWeights,
    pub cost_encoder: CostEncoder,
    pub decoder: CostDecoder,
    pub pretext_head: PretextHead,
    pub flow_updater: FlowUpdater,
}

impl Model {
    /// Registers every parameter. Encoders draw from `config.encoder_seed`,
    /// everything else from `init_seed`. Both encoders start frozen.
    pub fn build<S: Real>(config: &ModelConfig, init_seed: u64) -> Result<(Model, ParamStore<S>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut enc_rng = rng_for(config.encoder_seed, &[]);
        let mut ctx_rng = rng_for(config.encoder_seed, &[1]);
        let mut rng = rng_for(init_seed, &[]);
        let image_encoder = EncoderWeights::new(
            &mut Init::new(&mut store, &mut enc_rng, ""),
            IMAGE_ENCODER,
            config.feature_dim,
            config.encoder_seed,
        );
        let context_encoder = EncoderWeights::new(
            &mut Init::new(&mut store, &mut ctx_rng, ""),
            CONTEXT_ENCODER,
            config.context_dim,
            config.encoder_seed,
        );
        let model = build_trainable(&mut Init::new(&mut store, &mut rng, ""), config, image_encoder, context_encoder);
        store.set_frozen(&format!("{IMAGE_ENCODER}."), true);
        store.set_frozen(&format!("{CONTEXT_ENCODER}."), true);
        Ok((model, store))
    }

    /// Cost volume of a frame pair `[3, H, W]` under the image encoder.
    pub fn cost_volume<S: Real>(&self, store: &ParamStore<S>, frame1: &Tensor<S>, frame2: &Tensor<S>) -> Result<CostVolume<S>> {
        let f1 = encode_image(frame1, &self.image_encoder, store)?;
        let f2 = encode_image(frame2, &self.image_encoder, store)?;
        build_cost_volume(&f1, &f2)
    }

    /// Cost memory `[B·Hs·Ws, K, D_t]` for cost volumes that share one shape.
    pub fn encode_costs<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        volumes: &[&CostVolume<S>],
        masks: Option<&[&MaskPyramidSet]>,
    ) -> Result<Var> {
        let first = volumes.first().ok_or_else(|| Error::shape("no cost volumes to encode"))?;
        let source = first.source_dims();
        let (hc, wc) = first.map_dims();
        let mut data = Vec::with_capacity(volumes.len() * first.values().len());
        for cv in volumes {
            if cv.values().shape() != first.values().shape() {
                return Err(Error::shape("cost volumes in a batch must share one shape"));
            }
            data.extend_from_slice(cv.values().data());
        }
        let p = volumes.len() * first.num_sources();
        let maps = s.constant(Tensor::new(&[p, 1, hc, wc], data)?);
        let pyramids: Option<Vec<&MaskPyramid>> = masks.map(|sets| {
            sets.iter()
                .flat_map(|set| (0..set.num_pixels()).map(move |i| set.for_pixel(i)))
                .collect()
        });
        if let Some(pyr) = &pyramids {
            if pyr.len() != p {
                return Err(Error::shape(format!("masks for {} pixels, cost maps for {p}", pyr.len())));
            }
        }
        self.cost_encoder
            .encode(s, maps, volumes.len(), source, pyramids.as_deref())
    }
}

fn build_trainable<S: Real, R: Rng>(
    init: &mut Init<'_, S, R>,
    config: &ModelConfig,
    image_encoder: EncoderWeights,
    context_encoder: EncoderWeights,
) -> Model {
    Model {
        config: config.clone(),
        image_encoder,
        context_encoder,
        cost_encoder: CostEncoder::new(init, COST_ENCODER, config.cost_encoder_dims()),
        decoder: CostDecoder::new(init, DECODER, config.token_dim, config.ffn_hidden),
        pretext_head: PretextHead::new(init, PRETEXT_HEAD, config.token_dim, config.head_hidden),
        flow_updater: FlowUpdater::new(init, FLOW_UPDATER, config.token_dim, config.context_dim, config.gru_hidden),
    }
}

/// How pre-text queries are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PretextOptions {
    pub location_mode: LocationMode,
    pub query_mode: QueryMode,
    pub normalize_side: NormalizeSide,
}

impl Default for PretextOptions {
    fn default() -> Self {
        PretextOptions {
            location_mode: LocationMode::Random,
            query_mode: QueryMode::PePlusPatch,
            normalize_side: NormalizeSide::Target,
        }
    }
}

/// Pre-text loss over every source pixel of a batch. `locations_seed` drives
/// the choice of `o_x` per pixel.
pub fn pretext_forward<S: Real>(
    s: &mut Session<'_, S>,
    model: &Model,
    volumes: &[&CostVolume<S>],
    masks: Option<&[&MaskPyramidSet]>,
    options: &PretextOptions,
    locations_seed: u64,
) -> Result<Var> {
    let memory = model.encode_costs(s, volumes, masks)?;
    let (hc, wc) = volumes[0].map_dims();
    let mut rng = rng_for(locations_seed, &[]);
    let mut locations = Vec::new();
    let mut query = Vec::new();
    let mut targets = Vec::new();
    for cv in volumes {
        let (hs, ws) = cv.source_dims();
        for i in 0..hs * ws {
            let o = sample_pretext_location(&mut rng, hc, wc, options.location_mode);
            let map = cv.map(i / ws, i % ws);
            query.extend(kernels::crop_patches(map, hc, wc, &[o], QUERY_PATCH));
            let large = kernels::crop_patches(map, hc, wc, &[o], TARGET_PATCH);
            targets.push(PretextTarget::new(Tensor::new(&[TARGET_PATCH, TARGET_PATCH], large)?));
            locations.push(o);
        }
    }
    let patches = s.constant(Tensor::new(&[locations.len(), QUERY_PATCH * QUERY_PATCH], query)?);
    let c = model
        .decoder
        .decode_cost_feature(s, memory, Some(patches), &locations, options.query_mode)?;
    let pred = model.pretext_head.pretext_predict(s, c)?;
    pretext_loss(s, pred, &targets, options.normalize_side)
}

/// Flow predictions (grid units, `[P, 2]`) for every decoder iteration on a
/// batch of frame pairs.
pub fn flow_forward<S: Real>(
    s: &mut Session<'_, S>,
    model: &Model,
    frames1: &[&Tensor<S>],
    frames2: &[&Tensor<S>],
    n_iters: usize,
) -> Result<Vec<Var>> {
    let store = s.store();
    let volumes = frames1
        .iter()
        .zip(frames2)
        .map(|(a, b)| model.cost_volume(store, a, b))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CostVolume<S>> = volumes.iter().collect();
    flow_forward_volumes(s, model, &refs, frames1, n_iters)
}

/// [`flow_forward`] with the cost volumes already built (the image encoder is
/// frozen, so a pair's volume never changes during training).
pub fn flow_forward_volumes<S: Real>(
    s: &mut Session<'_, S>,
    model: &Model,
    volumes: &[&CostVolume<S>],
    frames1: &[&Tensor<S>],
    n_iters: usize,
) -> Result<Vec<Var>> {
    if volumes.len() != frames1.len() || volumes.is_empty() {
        return Err(Error::shape(format!(
            "{} cost volumes for {} frames",
            volumes.len(),
            frames1.len()
        )));
    }
    let memory = model.encode_costs(s, volumes, None)?;
    let (h, w) = volumes[0].source_dims();
    let batch = volumes.len();

    let mut imgs = Vec::new();
    for f in frames1 {
        imgs.extend_from_slice(f.data());
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(frames1[0].shape());
    let imgs = s.constant(Tensor::new(&shape, imgs)?);
    let ctx = model.context_encoder.forward(s, imgs)?;
    let ctx = s.permute(ctx, &[0, 2, 3, 1])?;
    let ctx = s.reshape(ctx, &[batch * h * w, model.config.context_dim])?;

    let mut maps = Vec::with_capacity(batch * h * w * h * w);
    for cv in volumes {
        maps.extend_from_slice(cv.values().data());
    }
    let maps = Tensor::new(&[batch * h * w, h, w], maps)?;
    let inputs = RecurrentInputs {
        memory,
        maps: &maps,
        context: ctx,
        batch,
        grid: (h, w),
    };
    run_recurrent_decoder(s, &model.decoder, &model.flow_updater, &inputs, n_iters)
}

/// Ground truth for [`flow_forward`] outputs: image-pixel flows `[2, H_I, W_I]`
/// averaged over each feature cell and divided by the stride, laid out `[P, 2]`.
pub fn grid_flow_target<S: Real>(flows: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    let mut rows = 0;
    for f in flows {
        let [2, hi, wi] = f.shape()[..] else {
            return Err(Error::shape(format!("flow must be [2,H,W], got {:?}", f.shape())));
        };
        let st = STRIDE_TO_IMAGE;
        if hi % st != 0 || wi % st != 0 {
            return Err(Error::shape(format!("flow size {hi}×{wi} must be a multiple of {st}")));
        }
        let (h, w) = (hi / st, wi / st);
        let norm = S::c((st * st * st) as f64);
        for y in 0..h {
            for x in 0..w {
                for c in 0..2 {
                    let mut acc = S::zero();
                    for dy in 0..st {
                        for dx in 0..st {
                            acc = acc + f.at(&[c, y * st + dy, x * st + dx]);
                        }
                    }
                    data.push(acc / norm);
                }
                rows += 1;
            }
        }
    }
    Tensor::new(&[rows, 2], data)
}

/// Finetuning objective: sequence loss of the recurrent flow estimates.
pub fn flow_loss<S: Real>(
    s: &mut Session<'_, S>,
    model: &Model,
    frames1: &[&Tensor<S>],
    frames2: &[&Tensor<S>],
    flows_gt: &[&Tensor<S>],
    n_iters: usize,
    gamma: f64,
) -> Result<Var> {
    let flows = flow_forward(s, model, frames1, frames2, n_iters)?;
    let gt = s.constant(grid_flow_target(flows_gt)?);
    sequence_loss(s, &flows, gt, gamma)
}

/// [`flow_loss`] on prebuilt cost volumes.
pub fn flow_loss_volumes<S: Real>(
    s: &mut Session<'_, S>,
    model: &Model,
    volumes: &[&CostVolume<S>],
    frames1: &[&Tensor<S>],
    flows_gt: &[&Tensor<S>],
    n_iters: usize,
    gamma: f64,
) -> Result<Var> {
    let flows = flow_forward_volumes(s, model, volumes, frames1, n_iters)?;
    let gt = s.constant(grid_flow_target(flows_gt)?);
    sequence_loss(s, &flows, gt, gamma)
}

/// Final-iteration flow for one frame pair as `[2, H, W]` in image pixels.
pub fn predict_flow<S: Real>(
    model: &Model,
    store: &ParamStore<S>,
    frame1: &Tensor<S>,
    frame2: &Tensor<S>,
    n_iters: usize,
) -> Result<Tensor<S>> {
    let mut s = Session::new(store);
    let flows = flow_forward(&mut s, model, &[frame1], &[frame2], n_iters)?;
    let last = s.value(*flows.last().expect("n_iters ≥ 1"));
    let (h, w) = (frame1.shape()[1] / STRIDE_TO_IMAGE, frame1.shape()[2] / STRIDE_TO_IMAGE);
    let st = S::c(STRIDE_TO_IMAGE as f64);
    let mut out = vec![S::zero(); 2 * h * w];
    for i in 0..h * w {
        out[i] = last.data()[2 * i] * st;
        out[h * w + i] = last.data()[2 * i + 1] * st;
    }
    Tensor::new(&[2, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            context_dim: 8,
            cost_dim: 8,
            num_latents: 2,
            token_dim: 8,
            agt_pairs: 1,
            ffn_hidden: 16,
            head_hidden: 16,
            gru_hidden: 8,
            encoder_seed: 3,
        }
    }

    #[test]
    fn encoders_depend_only_on_encoder_seed() {
        let (_, a) = Model::build::<f32>(&tiny(), 1).unwrap();
        let (_, b) = Model::build::<f32>(&tiny(), 2).unwrap();
        assert_eq!(a.checksum("image_encoder."), b.checksum("image_encoder."));
        assert_eq!(a.checksum("context_encoder."), b.checksum("context_encoder."));
        assert_ne!(a.checksum("cost_encoder."), b.checksum("cost_encoder."));
        let id = a.id_of("image_encoder.conv0.weight").unwrap();
        assert!(a.is_frozen(id));
    }

    #[test]
    fn grid_target_averages_cells() {
        let f = Tensor::<f64>::new(&[2, 4, 8], (0..64).map(|i| if i < 32 { 4.0 } else { (i % 8) as f64 }).collect()).unwrap();
        let t = grid_flow_target(&[&f]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 1.5 / 4.0, 1.0, 5.5 / 4.0]);
    }

    #[test]
    fn flow_predictions_start_at_zero() {
        let (model, store) = Model::build::<f32>(&tiny(), 1).unwrap();
        let img = Tensor::new(&[3, 32, 32], (0..3 * 1024).map(|i| ((i * 37 % 101) as f32) / 101.0).collect()).unwrap();
        let flow = predict_flow(&model, &store, &img, &img, 1).unwrap();
        assert_eq!(flow.shape(), &[2, 8, 8]);
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }
}
