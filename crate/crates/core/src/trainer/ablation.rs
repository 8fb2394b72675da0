//! Masking/query ablation sweep and the leakage-oracle report.

use std::fmt::{self, Write as _};

use super::config::{Phase, TrainConfig};
use super::{build_model, finetune, pretrain, prepare};
use crate::decoder::{LocationMode, QueryMode};
use crate::error::{Error, Result};
use crate::masking::{leakage_oracle_mse, MaskStrategy};
use crate::model::{Model, ModelConfig};
use crate::rng::rng_for;
use crate::synthdata::ScenePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Strategy,
    Ratio,
    Query,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Strategy => "strategy",
            AblationAxis::Ratio => "ratio",
            AblationAxis::Query => "query",
        })
    }
}

/// One pretraining variant and what it achieved.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub location_mode: LocationMode,
    pub query_mode: QueryMode,
    /// Mean pre-text loss over the last quarter of pretraining.
    pub pretext_loss: f64,
    /// Mean leakage-oracle error of the variant's masks on the training pairs.
    pub leakage_mse: f64,
    /// Held-out AEPE after finetuning, when a finetuning budget is given.
    pub val_aepe: Option<f64>,
}

impl AblationRow {
    pub fn query_label(&self) -> String {
        let loc = match self.location_mode {
            LocationMode::Fixed => "fixed",
            LocationMode::Random => "random",
            LocationMode::FlowPredicted => "flow",
        };
        match self.query_mode {
            QueryMode::PeOnly => format!("{loc}+pe"),
            QueryMode::PePlusPatch => format!("{loc}+pe+patch"),
        }
    }
}

/// Inputs of [`ablate`].
pub struct AblationSettings<'a> {
    /// Pretraining configuration every variant starts from.
    pub pretrain: TrainConfig,
    /// Finetuning configuration applied after each variant; `None` skips it.
    pub finetune: Option<TrainConfig>,
    pub train: &'a [ScenePair],
    pub val: &'a [ScenePair],
}

type Variant = (AblationAxis, MaskStrategy, f64, LocationMode, QueryMode);

fn variants(base: &TrainConfig) -> Vec<Variant> {
    let (loc, query) = (base.pretext.location_mode, base.pretext.query_mode);
    let mut out = vec![
        (AblationAxis::Strategy, MaskStrategy::Block, base.mask_ratio, loc, query),
        (AblationAxis::Strategy, MaskStrategy::Random, base.mask_ratio, loc, query),
    ];
    for ratio in [0.2, 0.5, 0.8] {
        out.push((AblationAxis::Ratio, MaskStrategy::Block, ratio, loc, query));
    }
    for (l, q) in [
        (LocationMode::Fixed, QueryMode::PeOnly),
        (LocationMode::Random, QueryMode::PeOnly),
        (LocationMode::Random, QueryMode::PePlusPatch),
    ] {
        out.push((AblationAxis::Query, base.mask_strategy, base.mask_ratio, l, q));
    }
    out
}

/// Mean leakage-oracle error of one masking setting over `pairs`.
fn mean_leakage(model: &Model, store: &crate::ParamStore, cfg: &TrainConfig, pairs: &[ScenePair], seed: u64) -> Result<f64> {
    let data = prepare(model, store, pairs)?;
    let mut total = 0.0;
    for (i, p) in data.iter().enumerate() {
        let (hs, ws) = p.volume.source_dims();
        let mut rng = rng_for(seed, &[0x1ea6, i as u64]);
        let Some(masks) = cfg.mask_strategy.generate(
            (hs, ws),
            p.volume.map_dims(),
            cfg.mask_ratio,
            cfg.side_range(hs, ws),
            &mut rng,
        )?
        else {
            return Ok(0.0);
        };
        total += leakage_oracle_mse(&p.volume, &masks)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Pretrains every variant along the strategy, ratio and query axes (and
/// optionally finetunes and validates each). Identical variants run once.
/// `progress` receives one line per finished variant.
pub fn ablate(settings: &AblationSettings<'_>, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let base = &settings.pretrain;
    if base.phase != Phase::Pretrain {
        return Err(Error::config("ablation needs a pretraining config (phase = pretrain)"));
    }
    let (model, store) = build_model(base)?;
    let leakage_pairs = &settings.train[..settings.train.len().min(32)];
    let mut rows: Vec<AblationRow> = Vec::new();
    for (axis, strategy, ratio, location_mode, query_mode) in variants(base) {
        let same = rows.iter().find(|r| {
            r.strategy == strategy && r.ratio == ratio && r.location_mode == location_mode && r.query_mode == query_mode
        });
        if let Some(prev) = same {
            let row = AblationRow { axis, ..prev.clone() };
            progress(&row);
            rows.push(row);
            continue;
        }
        let mut cfg = base.clone();
        cfg.mask_strategy = strategy;
        cfg.mask_ratio = ratio;
        cfg.pretext.location_mode = location_mode;
        cfg.pretext.query_mode = query_mode;
        let pre = pretrain(&cfg, settings.train, None)?;
        let tail = (cfg.steps / 4).max(1);
        let pretext_loss = pre.mean_loss(cfg.steps.saturating_sub(tail)..cfg.steps);
        let leakage_mse = mean_leakage(&model, &store, &cfg, leakage_pairs, cfg.seed)?;
        let val_aepe = match &settings.finetune {
            Some(ft) => {
                let out = finetune(ft, Some(&pre.checkpoint), settings.train, settings.val, None)?;
                out.validation.last().map(|v| v.1)
            }
            None => None,
        };
        let row = AblationRow {
            axis,
            strategy,
            ratio,
            location_mode,
            query_mode,
            pretext_loss,
            leakage_mse,
            val_aepe,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Fixed-width comparison table of an ablation sweep.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<9} {:<8} {:>6} {:<16} {:>13} {:>12} {:>9}",
        "axis", "strategy", "ratio", "query", "pretext_loss", "leakage_mse", "val_aepe"
    )
    .expect("string write");
    for r in rows {
        let aepe = r.val_aepe.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            s,
            "{:<9} {:<8} {:>5.0}% {:<16} {:>13.6} {:>12.6} {:>9}",
            r.axis.to_string(),
            r.strategy.to_string(),
            r.ratio * 100.0,
            r.query_label(),
            r.pretext_loss,
            r.leakage_mse,
            aepe
        )
        .expect("string write");
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeakageSeed {
    pub seed: u64,
    pub block: f64,
    pub random: f64,
}

/// Leakage-oracle error of block-sharing versus per-pixel random masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub ratio: f64,
    pub pairs: usize,
    pub seeds: Vec<LeakageSeed>,
}

impl LeakageReport {
    /// Block-sharing masks are harder to copy from in every seed.
    pub fn separated(&self) -> bool {
        !self.seeds.is_empty() && self.seeds.iter().all(|s| s.block > s.random)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ratio={}\npairs={}\n", self.ratio, self.pairs);
        for r in &self.seeds {
            writeln!(s, "seed={} block_mse={} random_mse={}", r.seed, r.block, r.random).expect("string write");
        }
        writeln!(s, "separated={}", self.separated()).expect("string write");
        s
    }
}

/// Mean leakage-oracle MSE per seed (`0..seeds`) on the cost volumes of
/// `pairs` under the image encoder of `model`.
pub fn leakage_report(pairs: &[ScenePair], model: &ModelConfig, ratio: f64, seeds: u64) -> Result<LeakageReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("leakage report needs at least one frame pair".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("ratio must lie in [0, 1], got {ratio}")));
    }
    let cfg = TrainConfig {
        model: model.clone(),
        ..TrainConfig::default()
    };
    let (net, store) = build_model(&cfg)?;
    let mut out = Vec::new();
    for seed in 0..seeds {
        let mut means = [0.0; 2];
        for (slot, strategy) in [MaskStrategy::Block, MaskStrategy::Random].into_iter().enumerate() {
            let cfg = TrainConfig {
                mask_strategy: strategy,
                mask_ratio: ratio,
                ..cfg.clone()
            };
            means[slot] = mean_leakage(&net, &store, &cfg, pairs, seed)?;
        }
        out.push(LeakageSeed {
            seed,
            block: means[0],
            random: means[1],
        });
    }
    Ok(LeakageReport {
        ratio,
        pairs: pairs.len(),
        seeds: out,
    })
}
