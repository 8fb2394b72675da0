//! Pretraining, finetuning, evaluation and checkpointing.

mod ablation;
mod checkpoint;
mod config;
mod metrics;

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{onecycle_lr, AdamW, AdamWConfig, ParamId, ParamStore, Session};
use crate::costvol::CostVolume;
use crate::encoders::STRIDE_TO_IMAGE;
use crate::error::{Error, Result};
use crate::masking::{masked_cells, MaskPyramidSet, BASE_CELL};
use crate::model::{
    flow_forward_volumes, flow_loss_volumes, pretext_forward, Model, CONTEXT_ENCODER, FLOW_UPDATER, IMAGE_ENCODER,
    PRETEXT_HEAD,
};
use crate::rng::{derive_seed, rng_for};
use crate::synthdata::{load_dataset, ScenePair};
use crate::tensor::Tensor;

pub use ablation::{
    ablate, ablation_table, leakage_report, AblationAxis, AblationRow, AblationSettings, LeakageReport, LeakageSeed,
};
pub use checkpoint::{Checkpoint, MAGIC, STEP_ENTRY, VERSION};
pub use config::{load_config, F1Rule, Phase, TrainConfig, FINETUNE_LR, PRETRAIN_LR};
pub use metrics::{flow_metrics, is_outlier, upsample_flow, FlowMetrics, MetricsAccumulator};

/// Stream tags that keep the phases' random draws apart.
const PRETRAIN_STREAM: u64 = 0x5052_4554;
const FINETUNE_STREAM: u64 = 0x4649_4e45;
/// Attempts at redrawing a sample's masks if one pixel ends up fully masked.
const MASK_ATTEMPTS: u64 = 16;

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss after each step, in step order.
    pub losses: Vec<f32>,
    /// `(step, held-out AEPE)` of every validation pass.
    pub validation: Vec<(usize, f64)>,
}

impl TrainOutcome {
    /// Mean loss over the steps `range` (clamped to the run).
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.losses.len());
        let start = range.start.min(end);
        let window = &self.losses[start..end];
        window.iter().map(|&v| f64::from(v)).sum::<f64>() / window.len().max(1) as f64
    }
}

/// One line of the loss log.
pub fn log_line(step: usize, phase: Phase, loss: f32, lr: f64) -> String {
    format!("step={step} phase={phase} loss={loss} lr={lr}")
}

fn write_log(log: &mut Option<&mut dyn Write>, line: &str) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{line}").map_err(|e| Error::io("loss log", e))?;
    }
    Ok(())
}

/// A frame pair with its (fixed) cost volume.
struct Prepared<'a> {
    pair: &'a ScenePair,
    volume: CostVolume,
}

fn prepare<'a>(model: &Model, store: &ParamStore, pairs: &'a [ScenePair]) -> Result<Vec<Prepared<'a>>> {
    pairs
        .iter()
        .map(|pair| {
            Ok(Prepared {
                pair,
                volume: model.cost_volume(store, &pair.frame1, &pair.frame2)?,
            })
        })
        .collect()
}

fn check_batch_shapes(pairs: &[ScenePair], what: &str) -> Result<()> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Dataset(format!("{what} contains no frame pairs")))?;
    if pairs.iter().any(|p| p.frame1.shape() != first.frame1.shape()) {
        return Err(Error::Dataset(format!("{what} mixes frame sizes")));
    }
    Ok(())
}

fn global_norm_clip(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> Result<()> {
    if max_norm <= 0.0 {
        return Ok(());
    }
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            *g = g.map(|v| v * k);
        }
    }
    Ok(())
}

fn frozen_checksums(store: &ParamStore, cfg: &TrainConfig) -> Vec<(String, u64)> {
    let mut prefixes = vec![format!("{IMAGE_ENCODER}.")];
    if cfg.freeze_context_encoder {
        prefixes.push(format!("{CONTEXT_ENCODER}."));
    }
    prefixes
        .into_iter()
        .map(|p| {
            let c = store.checksum(&p);
            (p, c)
        })
        .collect()
}

fn verify_frozen(store: &ParamStore, before: &[(String, u64)]) -> Result<()> {
    for (prefix, sum) in before {
        if store.checksum(prefix) != *sum {
            return Err(Error::Numerical(format!("frozen parameters {prefix}* changed during training")));
        }
    }
    Ok(())
}

/// Maps numerical failures inside a step to a divergence error.
fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical(msg) => Error::Diverged { step, msg },
        other => other,
    }
}

/// Builds the model of `cfg` with its freeze flags applied.
pub fn build_model(cfg: &TrainConfig) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.seed)?;
    store.set_frozen(&format!("{IMAGE_ENCODER}."), cfg.freeze_image_encoder);
    store.set_frozen(&format!("{CONTEXT_ENCODER}."), cfg.freeze_context_encoder);
    Ok((model, store))
}

struct Optimizer {
    adamw: AdamW,
    cfg: TrainConfig,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Optimizer {
            adamw: AdamW::new(
                AdamWConfig {
                    weight_decay: cfg.weight_decay,
                    ..Default::default()
                },
                store.len(),
            ),
            cfg: cfg.clone(),
        }
    }

    /// Backward pass, clipping and one update; returns the learning rate used.
    fn step(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Tensor)>, step: usize) -> Result<f64> {
        let mut grads: Vec<_> = grads.into_iter().filter(|(id, _)| !store.is_frozen(*id)).collect();
        global_norm_clip(&mut grads, self.cfg.grad_clip)?;
        let lr = onecycle_lr(step, self.cfg.steps, self.cfg.lr_max)?;
        self.adamw.step(store, &grads, lr)?;
        Ok(lr)
    }
}

/// Masks for one sample, redrawn if a pixel would lose every token.
fn sample_masks(cfg: &TrainConfig, volume: &CostVolume, seed: u64, attempt: u64) -> Result<Option<MaskPyramidSet>> {
    let (hs, ws) = volume.source_dims();
    let mut rng = rng_for(seed, &[attempt]);
    cfg.mask_strategy
        .generate((hs, ws), volume.map_dims(), cfg.mask_ratio, cfg.side_range(hs, ws), &mut rng)
}

/// Pretraining on in-memory pairs (labels are ignored).
pub fn pretrain(cfg: &TrainConfig, pairs: &[ScenePair], mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    if cfg.phase != Phase::Pretrain {
        return Err(Error::config("pretraining needs phase = pretrain"));
    }
    cfg.validate()?;
    check_batch_shapes(pairs, "pretraining data")?;
    let (model, mut store) = build_model(cfg)?;
    let data = prepare(&model, &store, pairs)?;
    let (hc, wc) = data[0].volume.map_dims();
    let base_cells = (hc / BASE_CELL) * (wc / BASE_CELL);
    if cfg.mask_strategy != crate::masking::MaskStrategy::None && masked_cells(base_cells, cfg.mask_ratio) >= base_cells {
        return Err(Error::config(format!(
            "mask.ratio = {} masks all {base_cells} cells of the {}×{} base mask",
            cfg.mask_ratio,
            hc / BASE_CELL,
            wc / BASE_CELL
        )));
    }
    let frozen = frozen_checksums(&store, cfg);
    let mut opt = Optimizer::new(cfg, &store);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seed = derive_seed(cfg.seed, &[PRETRAIN_STREAM, step as u64]);
        let mut rng = rng_for(seed, &[]);
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let volumes: Vec<&CostVolume> = batch.iter().map(|&i| &data[i].volume).collect();
        let mask_seeds: Vec<u64> = (0..batch.len()).map(|j| derive_seed(seed, &[1, j as u64])).collect();
        let mut attempts = vec![0u64; batch.len()];
        let mut masks: Vec<Option<MaskPyramidSet>> = volumes
            .iter()
            .zip(&mask_seeds)
            .map(|(cv, &s)| sample_masks(cfg, cv, s, 0))
            .collect::<Result<_>>()?;
        let locations_seed = derive_seed(seed, &[2]);
        let per_sample = data[0].volume.num_sources();
        let (loss, grads) = loop {
            let set_refs: Option<Vec<&MaskPyramidSet>> = masks.iter().map(Option::as_ref).collect();
            let mut s = Session::new(&store);
            let result = pretext_forward(&mut s, &model, &volumes, set_refs.as_deref(), &cfg.pretext, locations_seed);
            match result {
                Ok(loss) => {
                    let value = s.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::Diverged {
                            step: step + 1,
                            msg: format!("loss is {value}"),
                        });
                    }
                    let grads = s.param_grads(loss).map_err(diverged(step + 1))?;
                    break (value, grads);
                }
                Err(Error::AllTokensMasked(px)) => {
                    let j = px / per_sample;
                    attempts[j] += 1;
                    if attempts[j] >= MASK_ATTEMPTS {
                        return Err(Error::AllTokensMasked(px));
                    }
                    masks[j] = sample_masks(cfg, volumes[j], mask_seeds[j], attempts[j])?;
                }
                Err(e) => return Err(diverged(step + 1)(e)),
            }
        };
        let lr = opt.step(&mut store, grads, step).map_err(diverged(step + 1))?;
        losses.push(loss);
        write_log(&mut log, &log_line(step + 1, Phase::Pretrain, loss, lr))?;
    }
    verify_frozen(&store, &frozen)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::capture(&store, Some(&opt.adamw), cfg.steps as u64, cfg.to_text()),
        losses,
        validation: Vec::new(),
    })
}

/// Pretraining on the dataset at `cfg.data_path`.
pub fn run_pretraining(cfg: &TrainConfig, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let data = load_dataset(&cfg.data_path)?;
    pretrain(cfg, &data.pairs, log)
}

/// Whether a pretrained parameter carries over to finetuning: everything but
/// the reconstruction head and the (untrained) flow updater.
pub fn transfers_to_finetuning(name: &str) -> bool {
    !name.starts_with(&format!("{PRETEXT_HEAD}.")) && !name.starts_with(&format!("{FLOW_UPDATER}."))
}

/// Supervised finetuning on in-memory labeled pairs, validating on `val`.
pub fn finetune(
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    train: &[ScenePair],
    val: &[ScenePair],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if cfg.phase != Phase::Finetune {
        return Err(Error::config("finetuning needs phase = finetune"));
    }
    cfg.validate()?;
    check_batch_shapes(train, "finetuning data")?;
    if train.iter().any(|p| p.flow.is_none()) {
        return Err(Error::Dataset("finetuning data has no ground-truth flow".into()));
    }
    let (model, mut store) = build_model(cfg)?;
    if let Some(ck) = init {
        ck.load_into(&mut store, transfers_to_finetuning)?;
    }
    let data = prepare(&model, &store, train)?;
    let frozen = frozen_checksums(&store, cfg);
    let mut opt = Optimizer::new(cfg, &store);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut validation = Vec::new();
    for step in 0..cfg.steps {
        let seed = derive_seed(cfg.seed, &[FINETUNE_STREAM, step as u64]);
        let mut rng = rng_for(seed, &[]);
        let batch: Vec<&Prepared> = (0..cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let volumes: Vec<&CostVolume> = batch.iter().map(|p| &p.volume).collect();
        let frames: Vec<&Tensor> = batch.iter().map(|p| &p.pair.frame1).collect();
        let flows: Vec<&Tensor> = batch.iter().map(|p| p.pair.flow.as_ref().expect("checked")).collect();
        let mut s = Session::new(&store);
        let loss = flow_loss_volumes(&mut s, &model, &volumes, &frames, &flows, cfg.n_iters, cfg.gamma)
            .map_err(diverged(step + 1))?;
        let value = s.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                msg: format!("loss is {value}"),
            });
        }
        let grads = s.param_grads(loss).map_err(diverged(step + 1))?;
        drop(s);
        let lr = opt.step(&mut store, grads, step).map_err(diverged(step + 1))?;
        losses.push(value);
        write_log(&mut log, &log_line(step + 1, Phase::Finetune, value, lr))?;
        let done = step + 1;
        let due = (cfg.val_every > 0 && done % cfg.val_every == 0) || done == cfg.steps;
        if due && !val.is_empty() {
            let m = evaluate_pairs(&model, &store, cfg, val)?;
            validation.push((done, m.aepe));
        }
    }
    verify_frozen(&store, &frozen)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::capture(&store, Some(&opt.adamw), cfg.steps as u64, cfg.to_text()),
        losses,
        validation,
    })
}

/// Held-out subset used for validation.
fn validation_pairs(cfg: &TrainConfig) -> Result<Vec<ScenePair>> {
    let Some(path) = &cfg.val_path else {
        return Ok(Vec::new());
    };
    let ds = load_dataset(path)?;
    ds.require_labels()?;
    let n = if cfg.val_count == 0 { ds.pairs.len() } else { cfg.val_count.min(ds.pairs.len()) };
    Ok(ds.pairs.into_iter().take(n).collect())
}

/// Finetuning on the dataset at `cfg.data_path`.
pub fn run_finetuning(cfg: &TrainConfig, init: Option<&Checkpoint>, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let data = load_dataset(&cfg.data_path)?;
    data.require_labels()?;
    let val = validation_pairs(cfg)?;
    finetune(cfg, init, &data.pairs, &val, log)
}

/// Final-iteration flow of one pair at image resolution.
pub fn predict_pair(model: &Model, store: &ParamStore, cfg: &TrainConfig, pair: &ScenePair) -> Result<Tensor> {
    let volume = model.cost_volume(store, &pair.frame1, &pair.frame2)?;
    let mut s = Session::new(store);
    let flows = flow_forward_volumes(&mut s, model, &[&volume], &[&pair.frame1], cfg.n_iters)?;
    let last = s.value(*flows.last().expect("n_iters ≥ 1"));
    let (h, w) = volume.source_dims();
    let st = STRIDE_TO_IMAGE as f32;
    let mut grid = vec![0.0f32; 2 * h * w];
    for i in 0..h * w {
        grid[i] = last.data()[2 * i] * st;
        grid[h * w + i] = last.data()[2 * i + 1] * st;
    }
    upsample_flow(&Tensor::new(&[2, h, w], grid)?, STRIDE_TO_IMAGE)
}

/// Metrics of the model over labeled pairs.
pub fn evaluate_pairs(model: &Model, store: &ParamStore, cfg: &TrainConfig, pairs: &[ScenePair]) -> Result<FlowMetrics> {
    let mut acc = MetricsAccumulator::default();
    for pair in pairs {
        let gt = pair
            .flow
            .as_ref()
            .ok_or_else(|| Error::Dataset("evaluation pair has no ground-truth flow".into()))?;
        acc.add(&predict_pair(model, store, cfg, pair)?, gt, cfg.f1_rule)?;
    }
    Ok(acc.finish(cfg.f1_rule))
}

/// Rebuilds the model a checkpoint was trained with.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Model, ParamStore)> {
    let cfg = TrainConfig::parse(&ck.config_echo, "checkpoint config echo")?;
    let (model, mut store) = build_model(&cfg)?;
    ck.load_into(&mut store, |_| true)?;
    Ok((cfg, model, store))
}

/// Evaluates a checkpoint on the labeled dataset at `data`.
pub fn evaluate(ck: &Checkpoint, data: &Path) -> Result<FlowMetrics> {
    let ds = load_dataset(data)?;
    ds.require_labels()?;
    let (cfg, model, store) = model_from_checkpoint(ck)?;
    evaluate_pairs(&model, &store, &cfg, &ds.pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;
    use crate::model::ModelConfig;
    use crate::synthdata::{make_scene, MotionParams};

    pub(crate) fn tiny_config(phase: Phase) -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 2,
            model: ModelConfig {
                feature_dim: 8,
                context_dim: 8,
                cost_dim: 8,
                num_latents: 2,
                token_dim: 8,
                agt_pairs: 1,
                ffn_hidden: 16,
                head_hidden: 16,
                gru_hidden: 8,
                encoder_seed: 5,
            },
            n_iters: 2,
            ..TrainConfig::for_phase(phase)
        }
    }

    pub(crate) fn pairs(n: usize) -> Vec<ScenePair> {
        (0..n)
            .map(|i| make_scene(100 + i as u64, 64, 64, 0.01, &MotionParams::default()))
            .collect()
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let mut cfg = tiny_config(Phase::Pretrain);
        cfg.steps = 0;
        let out = pretrain(&cfg, &pairs(2), None).unwrap();
        let (_, store) = build_model(&cfg).unwrap();
        let init = Checkpoint::capture(&store, None, 0, cfg.to_text());
        for (name, t) in &init.entries {
            assert_eq!(out.checkpoint.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_logs() {
        let cfg = tiny_config(Phase::Pretrain);
        let data = pairs(3);
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let a = pretrain(&cfg, &data, Some(&mut log_a)).unwrap();
        let b = pretrain(&cfg, &data, Some(&mut log_b)).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        let text = String::from_utf8(log_a).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("step=1 phase=pretrain loss="), "{first}");
        assert_eq!(text.lines().count(), 3);
        // only the cost encoder, decoder and head move
        let (_, init) = build_model(&cfg).unwrap();
        let (_, _, trained) = model_from_checkpoint(&a.checkpoint).unwrap();
        for prefix in ["image_encoder.", "context_encoder.", "flow_updater."] {
            assert_eq!(init.checksum(prefix), trained.checksum(prefix), "{prefix}");
        }
        assert_ne!(init.checksum("cost_encoder."), trained.checksum("cost_encoder."));
    }

    #[test]
    fn strategies_and_unmasked_pretraining_run() {
        for strategy in [MaskStrategy::Random, MaskStrategy::None] {
            let mut cfg = tiny_config(Phase::Pretrain);
            cfg.mask_strategy = strategy;
            cfg.steps = 1;
            assert_eq!(pretrain(&cfg, &pairs(2), None).unwrap().losses.len(), 1);
        }
    }

    #[test]
    fn finetuning_from_scratch_and_pretrained() {
        let data = pairs(3);
        let pre = pretrain(&tiny_config(Phase::Pretrain), &data, None).unwrap();
        let mut cfg = tiny_config(Phase::Finetune);
        cfg.val_every = 2;
        let scratch = finetune(&cfg, None, &data, &data[..1], None).unwrap();
        let warm = finetune(&cfg, Some(&pre.checkpoint), &data, &data[..1], None).unwrap();
        assert_eq!(scratch.losses.len(), 3);
        assert_eq!(warm.validation.iter().map(|v| v.0).collect::<Vec<_>>(), vec![2, 3]);
        // the zero-initialized flow head makes the first loss init-independent
        assert_eq!(scratch.losses[0], warm.losses[0]);
        assert_ne!(scratch.losses[2], warm.losses[2]);
    }

    #[test]
    fn unlabeled_finetuning_is_dataset_error() {
        let mut data = pairs(2);
        data[1].flow = None;
        let err = finetune(&tiny_config(Phase::Finetune), None, &data, &[], None).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn mismatched_init_is_shape_error() {
        let pre = pretrain(&TrainConfig { steps: 0, ..tiny_config(Phase::Pretrain) }, &pairs(1), None).unwrap();
        let mut cfg = tiny_config(Phase::Finetune);
        cfg.model.token_dim = 12;
        let err = finetune(&cfg, Some(&pre.checkpoint), &pairs(1), &[], None).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn full_ratio_base_mask_is_rejected() {
        // 64×64 frames → 16×16 cost maps → 2×2 base cells, round(0.9·4) = 4
        let mut cfg = tiny_config(Phase::Pretrain);
        cfg.mask_ratio = 0.9;
        assert!(matches!(pretrain(&cfg, &pairs(1), None), Err(Error::Config(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let mut cfg = tiny_config(Phase::Finetune);
        cfg.lr_max = 1e30;
        cfg.grad_clip = 0.0;
        cfg.steps = 20;
        cfg.mask_ratio = 0.0;
        match finetune(&cfg, None, &pairs(2), &[], None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
