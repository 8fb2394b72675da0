//! `mcva`: data generation, pretraining, finetuning, evaluation and ablations.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcva_core::model::ModelConfig;
use mcva_core::synthdata::{generate_dataset, load_dataset, Manifest};
use mcva_core::trainer::{
    ablate, ablation_table, evaluate, leakage_report, load_config, run_finetuning, run_pretraining, AblationSettings,
    Checkpoint, Phase, TrainConfig, FINETUNE_LR,
};
use mcva_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mcva", version, about = "Masked cost-volume autoencoding for optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic frame-pair dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Frame size as HxW, e.g. 64x64.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        /// Also write ground-truth flow.
        #[arg(long)]
        labeled: bool,
        /// Standard deviation of the sensor noise added to frame 2.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Pretrain the cost encoder by masked cost reconstruction.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path (default: <out>.log).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Finetune on labeled flow, optionally from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path (default: <out>.log).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the metrics as key=value text here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep masking strategy, ratio and query design; write a comparison table.
    AblateMask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Finetuning steps per variant (0 compares pretraining only).
        #[arg(long, default_value_t = 0)]
        finetune_steps: usize,
    },
    /// Compare the leakage-oracle error of block-sharing and random masks.
    LeakageReport {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        seeds: u64,
        /// Config whose model.* keys select the image encoder.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| {
        v.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid extent {v:?} in {s:?}"))
    };
    Ok((dim(h)?, dim(w)?))
}

/// A runtime failure with the flag or file it concerns.
struct Failure {
    context: String,
    error: Error,
}

fn at(context: impl Into<String>) -> impl FnOnce(Error) -> Failure {
    let context = context.into();
    move |error| Failure { context, error }
}

fn flag(name: &str, path: &Path) -> String {
    format!("{name} {}", path.display())
}

fn io_failure(path: &Path, e: io::Error, name: &str) -> Failure {
    Failure {
        context: flag(name, path),
        error: Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn load_phase_config(path: &Path, phase: Phase) -> Result<TrainConfig, Failure> {
    let cfg = load_config(path).map_err(at(flag("--config", path)))?;
    if cfg.phase != phase {
        return Err(Failure {
            context: flag("--config", path),
            error: Error::Config(format!("phase = {} but this command needs phase = {phase}", cfg.phase)),
        });
    }
    Ok(cfg)
}

fn data_context(cfg: &TrainConfig, config: &Path) -> String {
    format!("data.path {} (from --config {})", cfg.data_path.display(), config.display())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            out,
            count,
            seed,
            size: (height, width),
            labeled,
            noise,
        } => {
            let manifest = Manifest {
                seed,
                count,
                width,
                height,
                noise,
                labeled,
            };
            generate_dataset(&out, &manifest).map_err(at(flag("--out", &out)))?;
            println!("wrote {count} pairs to {}", out.display());
        }
        Command::Pretrain { config, out, log } => {
            let cfg = load_phase_config(&config, Phase::Pretrain)?;
            let log_path = log.unwrap_or_else(|| default_log(&out));
            let mut file = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e, "--log"))?;
            let outcome = run_pretraining(&cfg, Some(&mut file)).map_err(at(data_context(&cfg, &config)))?;
            outcome.checkpoint.save(&out).map_err(at(flag("--out", &out)))?;
            println!(
                "pretrained {} steps, final loss {}; checkpoint {}, log {}",
                cfg.steps,
                outcome.losses.last().map_or(f32::NAN, |v| *v),
                out.display(),
                log_path.display()
            );
        }
        Command::Finetune { config, init, out, log } => {
            let cfg = load_phase_config(&config, Phase::Finetune)?;
            let init_ck = init
                .as_ref()
                .map(|p| Checkpoint::load(p).map_err(at(flag("--init", p))))
                .transpose()?;
            let log_path = log.unwrap_or_else(|| default_log(&out));
            let mut file = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e, "--log"))?;
            let context = match &init {
                Some(p) => format!("{} with --init {}", data_context(&cfg, &config), p.display()),
                None => data_context(&cfg, &config),
            };
            let outcome = run_finetuning(&cfg, init_ck.as_ref(), Some(&mut file)).map_err(at(context))?;
            outcome.checkpoint.save(&out).map_err(at(flag("--out", &out)))?;
            for (step, aepe) in &outcome.validation {
                println!("step={step} val_aepe={aepe}");
            }
            println!("finetuned {} steps; checkpoint {}, log {}", cfg.steps, out.display(), log_path.display());
        }
        Command::Eval { ckpt, data, report } => {
            let ck = Checkpoint::load(&ckpt).map_err(at(flag("--ckpt", &ckpt)))?;
            let metrics = evaluate(&ck, &data).map_err(|e| {
                let context = match e {
                    Error::Dataset(_) | Error::Format { .. } | Error::Io { .. } => flag("--data", &data),
                    _ => flag("--ckpt", &ckpt),
                };
                Failure { context, error: e }
            })?;
            let text = metrics.to_text();
            print!("{text}");
            if let Some(path) = report {
                fs::write(&path, &text).map_err(|e| io_failure(&path, e, "--report"))?;
            }
        }
        Command::AblateMask {
            config,
            out,
            finetune_steps,
        } => {
            let cfg = load_phase_config(&config, Phase::Pretrain)?;
            let data = load_dataset(&cfg.data_path).map_err(at(data_context(&cfg, &config)))?;
            let val = match &cfg.val_path {
                Some(p) => load_dataset(p)
                    .map_err(at(format!("data.val_path {} (from --config {})", p.display(), config.display())))?
                    .pairs,
                None => Vec::new(),
            };
            let finetune = (finetune_steps > 0).then(|| TrainConfig {
                phase: Phase::Finetune,
                steps: finetune_steps,
                lr_max: FINETUNE_LR,
                val_every: 0,
                ..cfg.clone()
            });
            if finetune.is_some() && (!data.is_labeled() || val.is_empty()) {
                return Err(Failure {
                    context: flag("--config", &config),
                    error: Error::Dataset("--finetune-steps needs labeled data.path and data.val_path".into()),
                });
            }
            let settings = AblationSettings {
                pretrain: cfg.clone(),
                finetune,
                train: &data.pairs,
                val: &val,
            };
            let rows = ablate(&settings, |row| {
                eprintln!(
                    "{} {} {} {}: pretext loss {:.6}",
                    row.axis,
                    row.strategy,
                    row.ratio,
                    row.query_label(),
                    row.pretext_loss
                );
            })
            .map_err(at(data_context(&cfg, &config)))?;
            fs::create_dir_all(&out).map_err(|e| io_failure(&out, e, "--out"))?;
            let table = ablation_table(&rows);
            let path = out.join("ablation.txt");
            fs::write(&path, &table).map_err(|e| io_failure(&path, e, "--out"))?;
            print!("{table}");
        }
        Command::LeakageReport {
            data,
            ratio,
            seeds,
            config,
        } => {
            let model = match &config {
                Some(p) => load_config(p).map_err(at(flag("--config", p)))?.model,
                None => ModelConfig::default(),
            };
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Failure {
                    context: "--ratio".into(),
                    error: Error::Config(format!("must lie in [0, 1], got {ratio}")),
                });
            }
            let ds = load_dataset(&data).map_err(at(flag("--data", &data)))?;
            let report = leakage_report(&ds.pairs, &model, ratio, seeds).map_err(at(flag("--data", &data)))?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => {
            let _ = io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}: {}", f.context, f.error);
            ExitCode::from(2)
        }
    }
}
