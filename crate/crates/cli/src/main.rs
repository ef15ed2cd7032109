use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cast_core::alignment::{select_trainable, train_pcgrad, SelectionStrategy, TrainConfig};
use cast_core::diagnosis::ScoreVariant;
use cast_core::experiment::{
    check_map_matches, diagnose, load_diagnosis, pretrain_with_progress, run_experiment, to_json, write_diagnosis, ExperimentConfig,
};
use cast_core::model::TransformerModel;
use cast_core::CastError;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INTEGRITY: u8 = 3;

/// Head-level conflict diagnosis and budget-matched sparse safety tuning on a
/// small transformer.
#[derive(Parser, Debug)]
#[command(name = "cast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the configured `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// The configuration and the resolved output directory.
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        Ok((cfg, out))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model and write `base.ckpt` and `base_report.json`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides the pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every head and write `conflict_map.csv` and `conflict_map.json`.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        score: Option<Score>,
        /// Overrides the calibration-set seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune selected heads and write `aligned.ckpt` and `history.json`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `conflict_map.json` produced by `diagnose` for this checkpoint.
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        strategy: Strategy,
        /// Fraction of heads for `random`, `top` and `bottom`.
        #[arg(long)]
        k: Option<f64>,
        /// 1-based bucket for `bucket`.
        #[arg(long)]
        bucket: Option<usize>,
        #[arg(long)]
        pcgrad: bool,
        /// Overrides the training (and random selection) seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the held-out sets and write `report.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the evaluation-set seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run pretraining, diagnosis and every configured arm for every seed.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Runs a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Score {
    Unified,
    OOnly,
    SOnly,
}

impl From<Score> for ScoreVariant {
    fn from(s: Score) -> Self {
        match s {
            Score::Unified => ScoreVariant::Unified,
            Score::OOnly => ScoreVariant::OOnly,
            Score::SOnly => ScoreVariant::SOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Full,
    Random,
    Bucket,
    Top,
    Bottom,
}

/// A run that completed but did not meet its goal.
#[derive(Debug)]
struct Unsuccessful(String);

impl std::fmt::Display for Unsuccessful {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Unsuccessful {}

fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    TransformerModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn strategy_from_flags(strategy: Strategy, k: Option<f64>, bucket: Option<usize>, seed: u64) -> Result<SelectionStrategy> {
    let fraction = || k.ok_or_else(|| CastError::Config(format!("--strategy {strategy:?} needs --k").to_lowercase()));
    Ok(match strategy {
        Strategy::Full => SelectionStrategy::Full,
        Strategy::Random => SelectionStrategy::RandomK { fraction: fraction()?, seed },
        Strategy::Top => SelectionStrategy::TopK { fraction: fraction()? },
        Strategy::Bottom => SelectionStrategy::BottomK { fraction: fraction()? },
        Strategy::Bucket => SelectionStrategy::Bucket {
            index: bucket.ok_or_else(|| CastError::Config("--strategy bucket needs --bucket".into()))?,
        },
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, seed } => {
            let (mut cfg, out) = common.load()?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let pre = pretrain_with_progress(&cfg, |e, r| {
                eprintln!("epoch {e}: acc_gen {:.4} primary {:.4} ref_safe {:.4}", r.u, r.m, r.s)
            })?;
            pre.model.save(&out.join("base.ckpt"))?;
            write(&out.join("base_report.json"), &to_json(&pre.report)?)?;
            if !pre.reached_target {
                bail!(Unsuccessful(format!(
                    "accuracy target {} not reached after {} epochs: acc_gen {:.4}, primary {:.4}",
                    cfg.pretrain.target_acc, pre.epochs, pre.report.u, pre.report.m
                )));
            }
            eprintln!("reached target after {} epochs", pre.epochs);
        }
        Command::Diagnose {
            common,
            checkpoint,
            score,
            seed,
        } => {
            let (mut cfg, out) = common.load()?;
            if let Some(s) = seed {
                cfg.calibration.seed = s;
            }
            cfg.validate()?;
            let model = load_checkpoint(&checkpoint)?;
            let variant = score.map_or(cfg.diagnosis.score, ScoreVariant::from);
            let doc = diagnose(&model, &cfg, variant)?;
            write_diagnosis(&out, &doc)?;
        }
        Command::Train {
            common,
            checkpoint,
            map,
            strategy,
            k,
            bucket,
            pcgrad,
            seed,
        } => {
            let (cfg, out) = common.load()?;
            let model = load_checkpoint(&checkpoint)?;
            let doc = load_diagnosis(&map)?;
            check_map_matches(&doc, &model)?;
            let train = TrainConfig {
                seed: seed.unwrap_or(cfg.train.seed),
                pcgrad,
                ..cfg.train.clone()
            };
            let selection = strategy_from_flags(strategy, k, bucket, train.seed)?;
            let trainable = select_trainable(&doc.bucketing, &selection)?;
            let data = cfg.alignment_set()?;
            let (util_ref, _) = cfg.calibration_sets()?;
            let suite = cfg.eval_suite()?;
            let (aligned, history) = train_pcgrad(&model, &data, &util_ref, &trainable, &train, Some(&suite))?;
            std::fs::create_dir_all(&out)?;
            aligned.save(&out.join("aligned.ckpt"))?;
            write(&out.join("history.json"), &to_json(&history)?)?;
        }
        Command::Eval {
            common,
            checkpoint,
            seed,
        } => {
            let (mut cfg, out) = common.load()?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let model = load_checkpoint(&checkpoint)?;
            let report = cfg.eval_suite()?.evaluate(&model)?;
            let json = to_json(&report)?;
            std::fs::create_dir_all(&out)?;
            write(&out.join("report.json"), &json)?;
            print!("{json}");
        }
        Command::Experiment { common, seed } => {
            let (mut cfg, out) = common.load()?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let report = run_experiment(&cfg, &out, |m| eprintln!("{m}"))?;
            if !report.failures.is_empty() {
                bail!(Unsuccessful(format!(
                    "{} failure(s):\n  {}",
                    report.failures.len(),
                    report.failures.join("\n  ")
                )));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Unsuccessful>().is_some() {
        return EXIT_FAILURE;
    }
    match err.downcast_ref::<CastError>() {
        Some(CastError::Config(_) | CastError::Input(_)) => EXIT_USAGE,
        Some(CastError::Integrity(_)) => EXIT_INTEGRITY,
        Some(CastError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
