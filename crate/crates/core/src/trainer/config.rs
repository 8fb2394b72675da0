//! Flat `key = value` training configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoder::LocationMode;
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::model::{ModelConfig, PretextOptions};

/// Default peak learning rate of each phase.
pub const PRETRAIN_LR: f64 = 5e-4;
pub const FINETUNE_LR: f64 = 1.25e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(format!("expected one of pretrain, finetune, got {s:?}")),
        }
    }
}

/// Outlier rule of the F1-all metric: error above 3 px `or`/`and` above 5% of
/// the ground-truth length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Rule {
    Or,
    And,
}

impl fmt::Display for F1Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            F1Rule::Or => "or",
            F1Rule::And => "and",
        })
    }
}

impl FromStr for F1Rule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "or" => Ok(F1Rule::Or),
            "and" => Ok(F1Rule::And),
            _ => Err(format!("expected one of or, and, got {s:?}")),
        }
    }
}

/// Everything a training or evaluation run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Drives initialization, batch sampling, masks and pre-text locations.
    pub seed: u64,
    pub data_path: PathBuf,
    /// Held-out labeled pairs for periodic validation; `None` disables it.
    pub val_path: Option<PathBuf>,
    /// Validation interval in steps; 0 validates only after the last step.
    pub val_every: usize,
    /// Number of held-out pairs used; 0 means all.
    pub val_count: usize,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    /// Block side range in source-grid cells; `None` picks it from the grid size.
    pub mask_side_range: Option<(usize, usize)>,
    pub pretext: PretextOptions,
    pub freeze_image_encoder: bool,
    pub freeze_context_encoder: bool,
    /// Recurrent decoder iterations.
    pub n_iters: usize,
    /// Sequence-loss decay.
    pub gamma: f64,
    pub f1_rule: F1Rule,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            steps: 2000,
            batch_size: 4,
            lr_max: PRETRAIN_LR,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            data_path: PathBuf::from("data/train"),
            val_path: None,
            val_every: 0,
            val_count: 0,
            mask_strategy: MaskStrategy::Block,
            mask_ratio: 0.5,
            mask_side_range: None,
            pretext: PretextOptions::default(),
            freeze_image_encoder: true,
            freeze_context_encoder: true,
            n_iters: 6,
            gamma: 0.8,
            f1_rule: F1Rule::Or,
            model: ModelConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Defaults for `phase`: its learning rate, and a trainable context
    /// encoder when finetuning.
    pub fn for_phase(phase: Phase) -> Self {
        TrainConfig {
            phase,
            lr_max: match phase {
                Phase::Pretrain => PRETRAIN_LR,
                Phase::Finetune => FINETUNE_LR,
            },
            freeze_context_encoder: phase == Phase::Pretrain,
            ..Default::default()
        }
    }

    /// Parses `key = value` lines (`#` starts a comment) and validates the
    /// result. Unset `train.lr_max` and `freeze.context_encoder` follow the
    /// phase defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut lr_set = false;
        let mut context_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|msg| at(format!("{key}: {msg}")))?;
            lr_set |= key == "train.lr_max";
            context_set |= key == "freeze.context_encoder";
        }
        if cfg.phase == Phase::Finetune {
            if !lr_set {
                cfg.lr_max = FINETUNE_LR;
            }
            if !context_set {
                cfg.freeze_context_encoder = false;
            }
        }
        cfg.validate()
            .map_err(|e| Error::Config(format!("{origin}: {}", e.to_string().trim_start_matches("config error: "))))?;
        Ok(cfg)
    }

    /// Assigns one key; the error names what was expected.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "phase" => self.phase = parse_value(v)?,
            "train.steps" => self.steps = parse_value(v)?,
            "train.batch_size" => self.batch_size = parse_value(v)?,
            "train.lr_max" => self.lr_max = parse_value(v)?,
            "train.weight_decay" => self.weight_decay = parse_value(v)?,
            "train.grad_clip" => self.grad_clip = parse_value(v)?,
            "train.seed" => self.seed = parse_value(v)?,
            "data.path" => self.data_path = PathBuf::from(v),
            "data.val_path" => self.val_path = parse_path(v),
            "val.every" => self.val_every = parse_value(v)?,
            "val.count" => self.val_count = parse_value(v)?,
            "mask.strategy" => self.mask_strategy = parse_value(v)?,
            "mask.ratio" => self.mask_ratio = parse_value(v)?,
            "mask.side_range" => {
                self.mask_side_range = if v == "auto" {
                    None
                } else {
                    let (a, b) = v
                        .split_once(',')
                        .ok_or_else(|| format!("expected `auto` or `min,max`, got {v:?}"))?;
                    Some((parse_value(a.trim())?, parse_value(b.trim())?))
                }
            }
            "pretext.location_mode" => self.pretext.location_mode = parse_value(v)?,
            "pretext.query_mode" => self.pretext.query_mode = parse_value(v)?,
            "pretext.normalize_side" => self.pretext.normalize_side = parse_value(v)?,
            "freeze.image_encoder" => self.freeze_image_encoder = parse_value(v)?,
            "freeze.context_encoder" => self.freeze_context_encoder = parse_value(v)?,
            "decoder.n_iters" => self.n_iters = parse_value(v)?,
            "finetune.gamma" => self.gamma = parse_value(v)?,
            "eval.f1_rule" => self.f1_rule = parse_value(v)?,
            "model.feature_dim" => m.feature_dim = parse_value(v)?,
            "model.context_dim" => m.context_dim = parse_value(v)?,
            "model.cost_dim" => m.cost_dim = parse_value(v)?,
            "model.num_latents" => m.num_latents = parse_value(v)?,
            "model.token_dim" => m.token_dim = parse_value(v)?,
            "model.agt_pairs" => m.agt_pairs = parse_value(v)?,
            "model.ffn_hidden" => m.ffn_hidden = parse_value(v)?,
            "model.head_hidden" => m.head_hidden = parse_value(v)?,
            "model.gru_hidden" => m.gru_hidden = parse_value(v)?,
            "model.encoder_seed" => m.encoder_seed = parse_value(v)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Every key in a fixed order; [`TrainConfig::parse`] reads it back to an
    /// equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let side = match self.mask_side_range {
            None => "auto".to_string(),
            Some((a, b)) => format!("{a},{b}"),
        };
        let lines = [
            ("phase", self.phase.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr_max", format!("{:?}", self.lr_max)),
            ("train.weight_decay", format!("{:?}", self.weight_decay)),
            ("train.grad_clip", format!("{:?}", self.grad_clip)),
            ("train.seed", self.seed.to_string()),
            ("data.path", self.data_path.display().to_string()),
            ("data.val_path", path(&self.val_path)),
            ("val.every", self.val_every.to_string()),
            ("val.count", self.val_count.to_string()),
            ("mask.strategy", self.mask_strategy.to_string()),
            ("mask.ratio", format!("{:?}", self.mask_ratio)),
            ("mask.side_range", side),
            ("pretext.location_mode", self.pretext.location_mode.to_string()),
            ("pretext.query_mode", self.pretext.query_mode.to_string()),
            ("pretext.normalize_side", self.pretext.normalize_side.to_string()),
            ("freeze.image_encoder", self.freeze_image_encoder.to_string()),
            ("freeze.context_encoder", self.freeze_context_encoder.to_string()),
            ("decoder.n_iters", self.n_iters.to_string()),
            ("finetune.gamma", format!("{:?}", self.gamma)),
            ("eval.f1_rule", self.f1_rule.to_string()),
            ("model.feature_dim", m.feature_dim.to_string()),
            ("model.context_dim", m.context_dim.to_string()),
            ("model.cost_dim", m.cost_dim.to_string()),
            ("model.num_latents", m.num_latents.to_string()),
            ("model.token_dim", m.token_dim.to_string()),
            ("model.agt_pairs", m.agt_pairs.to_string()),
            ("model.ffn_hidden", m.ffn_hidden.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.gru_hidden", m.gru_hidden.to_string()),
            ("model.encoder_seed", m.encoder_seed.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return fail(format!("train.lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("train.weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return fail(format!("train.grad_clip must be ≥ 0, got {}", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail(format!("mask.ratio must lie in [0, 1], got {}", self.mask_ratio));
        }
        if let Some((a, b)) = self.mask_side_range {
            if a == 0 || a > b {
                return fail(format!("mask.side_range needs 1 ≤ min ≤ max, got {a},{b}"));
            }
        }
        if self.n_iters == 0 {
            return fail("decoder.n_iters must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("finetune.gamma must lie in (0, 1], got {}", self.gamma));
        }
        // Cost volumes are built outside the differentiable graph, so the image
        // encoder cannot learn in either phase.
        if !self.freeze_image_encoder {
            return fail(match self.phase {
                Phase::Pretrain => "pretraining requires freeze.image_encoder = true (it diverges otherwise)".into(),
                Phase::Finetune => "freeze.image_encoder = false is not supported: cost volumes are built outside the graph".into(),
            });
        }
        if self.phase == Phase::Pretrain {
            if self.mask_ratio >= 1.0 {
                return fail("pretraining forbids mask.ratio = 1 (nothing would remain visible)".into());
            }
            if self.pretext.location_mode == LocationMode::FlowPredicted {
                return fail("pretext.location_mode = flow_predicted needs a flow and is finetune-only".into());
            }
        }
        self.model.validate()
    }

    /// Block side range for a source grid.
    pub fn side_range(&self, height: usize, width: usize) -> (usize, usize) {
        self.mask_side_range
            .unwrap_or_else(|| crate::masking::default_side_range(height, width))
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::parse(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{NormalizeSide, QueryMode};

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(TrainConfig::parse("", "c").unwrap(), TrainConfig::default());
        assert_eq!(
            TrainConfig::parse("# only a comment\n\n", "c").unwrap(),
            TrainConfig::default()
        );
    }

    #[test]
    fn values_and_comments() {
        let cfg = TrainConfig::parse("mask.ratio = 0.5 # half\nmask.strategy=random\n", "c").unwrap();
        assert_eq!(cfg.mask_ratio, 0.5);
        assert_eq!(cfg.mask_strategy, MaskStrategy::Random);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = TrainConfig::parse("train.steps = 3\nbogus = 1\n", "cfg.txt").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("cfg.txt:2") && m.contains("bogus")), "{err}");
        let err = TrainConfig::parse("\n\ntrain.steps = many\n", "cfg.txt").unwrap_err();
        assert!(err.to_string().contains("cfg.txt:3"), "{err}");
        let err = TrainConfig::parse("no equals sign\n", "cfg.txt").unwrap_err();
        assert!(err.to_string().contains("cfg.txt:1"), "{err}");
    }

    #[test]
    fn range_checks() {
        assert!(matches!(TrainConfig::parse("mask.ratio = 1.5", "c"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("mask.ratio = 1.0", "c").is_err());
        assert!(TrainConfig::parse("phase = finetune\nmask.ratio = 1.0", "c").is_ok());
        assert!(TrainConfig::parse("freeze.image_encoder = false", "c").is_err());
        assert!(TrainConfig::parse("mask.side_range = 4,2", "c").is_err());
        assert!(TrainConfig::parse("model.token_dim = 6", "c").is_err());
    }

    #[test]
    fn finetune_phase_defaults() {
        let cfg = TrainConfig::parse("phase = finetune\n", "c").unwrap();
        assert_eq!(cfg.lr_max, FINETUNE_LR);
        assert!(!cfg.freeze_context_encoder);
        assert_eq!(cfg, TrainConfig::for_phase(Phase::Finetune));
        let cfg = TrainConfig::parse("phase = finetune\ntrain.lr_max = 0.001\nfreeze.context_encoder = true\n", "c").unwrap();
        assert_eq!(cfg.lr_max, 0.001);
        assert!(cfg.freeze_context_encoder);
        let cfg = TrainConfig::parse("", "c").unwrap();
        assert!(cfg.freeze_context_encoder && cfg.freeze_image_encoder);
        assert_eq!(cfg.n_iters, 6);
    }

    #[test]
    fn emit_parse_roundtrip() {
        let mut cfg = TrainConfig::for_phase(Phase::Finetune);
        cfg.val_path = Some(PathBuf::from("held out/val"));
        cfg.mask_side_range = Some((2, 7));
        cfg.lr_max = 0.1 + 0.2;
        cfg.pretext.query_mode = QueryMode::PeOnly;
        cfg.pretext.normalize_side = NormalizeSide::Prediction;
        cfg.f1_rule = F1Rule::And;
        let back = TrainConfig::parse(&cfg.to_text(), "c").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }
}
