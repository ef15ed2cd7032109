//! End-to-end experiment: pretrain, diagnose, align every arm under every
//! seed, then score the trade-offs.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{select_trainable, train_pcgrad, Optimizer, OptimizerKind, SelectionStrategy, TrainConfig, TrainHistory};
use crate::autodiff::{Reduction, Tape};
use crate::diagnosis::{bucketize, build_conflict_map, conflict_map_csv, format_sig9, Bucketing, ConflictMapDocument, ScoreVariant};
use crate::error::{CastError, Result};
use crate::metrics::{bucket_validity, cost_ratios, CorrelationReport, CostRatios, CostTarget, EvalReport, EvalSuite, DEFAULT_EPS};
use crate::model::{HeadId, HeadMask, ModelConfig, TransformerModel};
use crate::synthdata::{gen_alignment, gen_safety, gen_utility, wrap_with_distractors, DataConfig, MAX_DISTRACTORS, Sample, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Training samples per utility task.
    pub samples_per_task: usize,
    /// Vanilla-harmful samples mixed in, as a fraction of the utility samples.
    pub refusal_fraction: f64,
    /// Harmful samples get up to this many benign value tokens before the marker.
    pub refusal_context_max: usize,
    /// Fraction of utility samples wrapped with distractor tokens.
    pub wrapped_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop once both mean and primary-task held-out accuracy reach this.
    pub target_acc: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            samples_per_task: 2048,
            refusal_fraction: 0.1,
            wrapped_fraction: 0.0,
            refusal_context_max: 1,
            batch_size: 8,
            lr: 2e-3,
            max_epochs: 60,
            target_acc: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetSizes {
    pub seed: u64,
    pub util_per_task: usize,
    pub safe_per_split: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosisConfig {
    pub score: ScoreVariant,
    pub buckets: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self {
            score: ScoreVariant::Unified,
            buckets: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentDataConfig {
    pub seed: u64,
    pub size: usize,
    /// Vanilla-harmful, adversarial-harmful, vanilla-benign, adversarial-benign.
    pub proportions: [f64; 4],
}

impl Default for AlignmentDataConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            size: 512,
            proportions: [0.25, 0.5, 0.25, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub strategy: SelectionStrategy,
    #[serde(default)]
    pub pcgrad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub calibration: SetSizes,
    pub eval: SetSizes,
    pub diagnosis: DiagnosisConfig,
    pub alignment: AlignmentDataConfig,
    pub train: TrainConfig,
    pub arms: Vec<ArmConfig>,
}

impl Default for SetSizes {
    fn default() -> Self {
        Self {
            seed: 3,
            util_per_task: 256,
            safe_per_split: 128,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: "out".into(),
            seeds: vec![21, 42, 84],
            eps: DEFAULT_EPS,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            calibration: SetSizes {
                seed: 101,
                ..SetSizes::default()
            },
            eval: SetSizes {
                seed: 202,
                ..SetSizes::default()
            },
            diagnosis: DiagnosisConfig::default(),
            alignment: AlignmentDataConfig::default(),
            train: desk_train_config(),
            arms: default_arms(),
        }
    }
}

/// Alignment settings for the desk-scale model: direct query-slice updates
/// with a larger step and more epochs than the large-model defaults, which
/// barely move a randomly initialized toy model.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        epochs: 30,
        adapter_rank: 0,
        ..TrainConfig::default()
    }
}

/// Full SFT, random 25%, each bucket, a top/bottom sweep and PCGrad variants.
pub fn default_arms() -> Vec<ArmConfig> {
    let arm = |name: &str, strategy, pcgrad| ArmConfig {
        name: name.into(),
        strategy,
        pcgrad,
    };
    let mut arms = vec![
        arm("full", SelectionStrategy::Full, false),
        arm("random-25", SelectionStrategy::RandomK { fraction: 0.25, seed: 0 }, false),
    ];
    for i in 1..=4 {
        arms.push(arm(&format!("bucket-{i}"), SelectionStrategy::Bucket { index: i }, false));
    }
    for k in [0.125, 0.5] {
        let pct = (k * 100.0) as u32;
        arms.push(arm(&format!("top-{pct}"), SelectionStrategy::TopK { fraction: k }, false));
        arms.push(arm(&format!("bottom-{pct}"), SelectionStrategy::BottomK { fraction: k }, false));
    }
    arms.push(arm("full-pcgrad", SelectionStrategy::Full, true));
    arms.push(arm("bucket-1-pcgrad", SelectionStrategy::Bucket { index: 1 }, true));
    arms
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CastError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CastError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.vocab_size != self.model.vocab_size {
            return Err(CastError::config("data and model vocab sizes differ"));
        }
        if self.data.max_prompt_len() > self.model.max_seq_len {
            return Err(CastError::config(format!(
                "prompts up to {} tokens exceed max_seq_len {}",
                self.data.max_prompt_len(),
                self.model.max_seq_len
            )));
        }
        if self.seeds.is_empty() {
            return Err(CastError::config("at least one seed is required"));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(CastError::config("seeds must be unique"));
        }
        if !(self.eps > 0.0) {
            return Err(CastError::config("eps must be positive"));
        }
        let p = &self.pretrain;
        if p.samples_per_task == 0 || p.batch_size == 0 || p.max_epochs == 0 || !(p.lr > 0.0) {
            return Err(CastError::config("pretrain sizes, epochs and lr must be positive"));
        }
        if !(0.0..=1.0).contains(&p.target_acc) || !(0.0..=1.0).contains(&p.refusal_fraction)
            || !(0.0..=1.0).contains(&p.wrapped_fraction)
        {
            return Err(CastError::config("pretrain target_acc and fractions must lie in [0, 1]"));
        }
        if p.refusal_context_max > MAX_DISTRACTORS {
            return Err(CastError::config(format!(
                "refusal_context_max must be <= {MAX_DISTRACTORS}"
            )));
        }
        for s in [&self.calibration, &self.eval] {
            if s.util_per_task == 0 || s.safe_per_split == 0 {
                return Err(CastError::config("calibration and evaluation sets must be nonempty"));
            }
        }
        if self.alignment.size == 0 {
            return Err(CastError::config("alignment size must be positive"));
        }
        let n = self.model.n_total_heads();
        if self.diagnosis.buckets < 1 || self.diagnosis.buckets > n {
            return Err(CastError::config(format!("bucket count outside [1, {n}]")));
        }
        let names: BTreeSet<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        if names.len() != self.arms.len() {
            return Err(CastError::config("arm names must be unique"));
        }
        Ok(())
    }

    fn utility_sets(&self, sizes: &SetSizes) -> Result<Vec<crate::synthdata::UtilitySet>> {
        TaskKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| gen_utility(k, sizes.util_per_task, sizes.seed + i as u64, &self.data))
            .collect()
    }

    fn safety_sets(&self, sizes: &SetSizes) -> Result<Vec<crate::synthdata::SafetySet>> {
        [false, true]
            .iter()
            .map(|&adv| gen_safety(sizes.safe_per_split, sizes.seed, adv, &self.data))
            .collect()
    }

    /// Held-out evaluation sets.
    pub fn eval_suite(&self) -> Result<EvalSuite> {
        let suite = EvalSuite {
            utility: self.utility_sets(&self.eval)?,
            safety: self.safety_sets(&self.eval)?,
        };
        suite.validate()?;
        Ok(suite)
    }

    /// `(utility, safety)` calibration samples for diagnosis.
    pub fn calibration_sets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let util = self.utility_sets(&self.calibration)?.into_iter().flat_map(|s| s.samples).collect();
        let safe = self.safety_sets(&self.calibration)?.into_iter().flat_map(|s| s.samples).collect();
        Ok((util, safe))
    }

    pub fn alignment_set(&self) -> Result<Vec<Sample>> {
        Ok(gen_alignment(self.alignment.size, self.alignment.proportions, self.alignment.seed, &self.data)?.samples)
    }
}

/// Outcome of pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: TransformerModel,
    pub report: EvalReport,
    pub epochs: usize,
    pub reached_target: bool,
}

const PRETRAIN_SALT: u64 = 0x5052_4554;
const WRAP_SALT: u64 = 0x5752_4150;

/// Full-parameter training on utility data (plus the configured refusal mix)
/// until held-out accuracy reaches the target or epochs run out.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<Pretrained> {
    pretrain_with_progress(cfg, |_, _| {})
}

/// As [`pretrain`], calling `progress(epoch, report)` after every epoch.
pub fn pretrain_with_progress(cfg: &ExperimentConfig, mut progress: impl FnMut(usize, &EvalReport)) -> Result<Pretrained> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let mut data: Vec<Sample> = Vec::new();
    for (i, &k) in TaskKind::ALL.iter().enumerate() {
        data.extend(gen_utility(k, p.samples_per_task, p.seed + i as u64, &cfg.data)?.samples);
    }
    let mut wrap_rng = ChaCha8Rng::seed_from_u64(p.seed ^ WRAP_SALT);
    for s in data.iter_mut() {
        if wrap_rng.gen::<f64>() < p.wrapped_fraction {
            wrap_with_distractors(s, &cfg.data, &mut wrap_rng);
        }
    }
    let n_refuse = (data.len() as f64 * p.refusal_fraction).round() as usize;
    if n_refuse > 0 {
        let mut harmful = gen_safety(n_refuse, p.seed, false, &cfg.data)?.samples;
        for s in harmful.iter_mut() {
            let n = wrap_rng.gen_range(0..=p.refusal_context_max);
            let ctx: Vec<usize> = (0..n).map(|_| cfg.data.value_token(wrap_rng.gen_range(0..cfg.data.value_range()))).collect();
            s.tokens.splice(1..1, ctx);
        }
        data.extend(harmful);
    }
    let suite = cfg.eval_suite()?;
    let mut model = TransformerModel::init(cfg.model.clone())?;
    let n_params = model.param_count();
    let mut opt = Optimizer::new(OptimizerKind::Adam, n_params, p.lr, 0.9, 0.999, 1e-8);
    let mut flat: Vec<f64> = model.params().iter().flat_map(|t| t.data.iter().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ PRETRAIN_SALT);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = suite.evaluate(&model)?;
    let mut epochs = 0;
    while epochs < p.max_epochs && !(report.u >= p.target_acc && report.m >= p.target_acc) {
        order.shuffle(&mut rng);
        for (step, idx) in order.chunks(p.batch_size).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| data[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |_| true);
            let loss = model.answer_loss(&mut tape, &bound, &batch, &HeadMask::none(), Reduction::Mean)?;
            if !tape.value(loss)[0].is_finite() {
                return Err(CastError::Numeric(format!("pretraining diverged at epoch {epochs} step {step}")));
            }
            tape.backward(loss)?;
            let grad: Vec<f64> = bound.vars.iter().flat_map(|&v| tape.grad(v).iter().copied()).collect();
            opt.step(&mut flat, &grad);
            let mut off = 0;
            for i in 0..model.params().len() {
                let t = model.param_mut(crate::model::ParamId(i));
                let n = t.data.len();
                t.data.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        epochs += 1;
        report = suite.evaluate(&model)?;
        progress(epochs, &report);
    }
    let reached_target = report.u >= p.target_acc && report.m >= p.target_acc;
    Ok(Pretrained {
        model,
        report,
        epochs,
        reached_target,
    })
}

/// Conflict map of `model` on the configured calibration sets, bucketed by
/// `variant`.
pub fn diagnose(model: &TransformerModel, cfg: &ExperimentConfig, variant: ScoreVariant) -> Result<ConflictMapDocument> {
    if model.config() != &cfg.model {
        return Err(CastError::Integrity(format!(
            "checkpoint model config {} differs from the configured model",
            model.checksum()
        )));
    }
    let (util, safe) = cfg.calibration_sets()?;
    let mut map = build_conflict_map(model, &util, &safe)?;
    map.provenance.calibration_seeds = vec![cfg.calibration.seed];
    let bucketing = bucketize(&map, cfg.diagnosis.buckets, variant)?;
    Ok(ConflictMapDocument { map, bucketing })
}

/// Rejects a conflict map computed on a different model.
pub fn check_map_matches(doc: &ConflictMapDocument, model: &TransformerModel) -> Result<()> {
    let actual = model.checksum();
    if doc.map.provenance.model_checksum != actual {
        return Err(CastError::Integrity(format!(
            "conflict map was computed for model {} but the checkpoint is {actual}",
            doc.map.provenance.model_checksum
        )));
    }
    Ok(())
}

/// Writes `conflict_map.csv` and `conflict_map.json` into `dir`.
pub fn write_diagnosis(dir: &Path, doc: &ConflictMapDocument) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("conflict_map.csv"), conflict_map_csv(&doc.map, &doc.bucketing)?)?;
    std::fs::write(dir.join("conflict_map.json"), to_json(doc)?)?;
    Ok(())
}

/// Reads a `conflict_map.json`; anything unparsable is an integrity error.
pub fn load_diagnosis(path: &Path) -> Result<ConflictMapDocument> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CastError::Integrity(format!("{} is not a conflict map: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// One trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub trainable_heads: Vec<HeadId>,
    pub trainable_params: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub report: EvalReport,
    pub costs: CostRatios,
    /// Every parameter outside the trainable query slices kept its bytes.
    pub frozen_intact: bool,
}

/// A trained model together with its summary and full history.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: TransformerModel,
    pub result: RunResult,
    pub history: TrainHistory,
}

/// Trains one arm for one seed and scores it against `base_report`.
#[allow(clippy::too_many_arguments)]
pub fn train_arm(
    base: &TransformerModel,
    base_report: &EvalReport,
    bucketing: &Bucketing,
    arm: &ArmConfig,
    seed: u64,
    cfg: &ExperimentConfig,
    suite: &EvalSuite,
    data: &[Sample],
    util_ref: &[Sample],
) -> Result<TrainedRun> {
    let strategy = match arm.strategy {
        SelectionStrategy::RandomK { fraction, seed: s } => SelectionStrategy::RandomK {
            fraction,
            seed: s.wrapping_add(seed),
        },
        other => other,
    };
    let trainable = select_trainable(bucketing, &strategy)?;
    let train_cfg = TrainConfig {
        seed,
        pcgrad: arm.pcgrad,
        ..cfg.train.clone()
    };
    let digest = base.frozen_digest(&trainable);
    let (model, history) = train_pcgrad(base, data, util_ref, &trainable, &train_cfg, Some(suite))?;
    let report = suite.evaluate(&model)?;
    let costs = cost_ratios(base_report, &report, cfg.eps)?;
    let result = RunResult {
        seed,
        trainable_heads: history.trainable_heads.clone(),
        trainable_params: history.trainable_params,
        steps: history.losses.len(),
        final_loss: history.losses.last().copied().unwrap_or(f64::NAN),
        report,
        costs,
        frozen_intact: model.frozen_digest(&trainable) == digest,
    };
    if !result.frozen_intact {
        return Err(CastError::Contract(format!("arm {} seed {seed} modified frozen parameters", arm.name)));
    }
    Ok(TrainedRun { model, result, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub name: String,
    pub strategy: SelectionStrategy,
    pub pcgrad: bool,
    pub runs: Vec<RunResult>,
    /// Seed-averaged report and the cost ratios derived from it.
    pub mean_report: Option<EvalReport>,
    pub mean_costs: Option<CostRatios>,
    pub error: Option<String>,
}

/// One row of the per-bucket validity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: usize,
    pub heads: Vec<HeadId>,
    pub mean_score: f64,
    pub ucr: f64,
    pub task_cr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketValidity {
    pub rows: Vec<BucketRow>,
    pub ucr: CorrelationReport,
    pub task_cr: CorrelationReport,
    /// Spearman correlation with UCR computed from each seed alone.
    pub per_seed_spearman_ucr: Vec<(u64, Option<f64>)>,
}

/// Risky-versus-safe bucket comparison, per seed and in median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneComparison {
    pub risky_bucket: usize,
    pub safe_bucket: usize,
    /// `(seed, risky acc_gen, safe acc_gen, risky ref_safe, safe ref_safe)`.
    pub per_seed: Vec<(u64, f64, f64, f64, f64)>,
    pub median_risky_acc_gen: f64,
    pub median_safe_acc_gen: f64,
    pub median_risky_ref_safe: f64,
    pub median_safe_ref_safe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub reached_target: bool,
    pub checksum: String,
    pub report: EvalReport,
}

/// Consolidated experiment output. Contains no timing, so identical
/// configurations produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub pretrain: PretrainSummary,
    pub diagnosis: ConflictMapDocument,
    pub arms: Vec<ArmOutcome>,
    pub bucket_validity: Option<BucketValidity>,
    pub zones: Option<ZoneComparison>,
    pub failures: Vec<String>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.name == name)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// The successful plain (non-PCGrad) arm training bucket `index`.
fn bucket_arm(arms: &[ArmOutcome], index: usize) -> Option<&ArmOutcome> {
    arms.iter().find(|a| {
        !a.pcgrad && a.error.is_none() && matches!(a.strategy, SelectionStrategy::Bucket { index: i } if i == index)
    })
}

fn compute_bucket_validity(doc: &ConflictMapDocument, arms: &[ArmOutcome]) -> Result<Option<BucketValidity>> {
    let m = doc.bucketing.buckets.len();
    let Some(bucket_arms) = (1..=m).map(|i| bucket_arm(arms, i)).collect::<Option<Vec<_>>>() else {
        return Ok(None);
    };
    if m < 2 {
        return Ok(None);
    }
    let costs: Vec<CostRatios> = bucket_arms.iter().map(|a| a.mean_costs.expect("successful arm")).collect();
    let ucr = bucket_validity(&doc.map, &doc.bucketing, &costs, CostTarget::Ucr)?;
    let task_cr = bucket_validity(&doc.map, &doc.bucketing, &costs, CostTarget::TaskCr)?;
    let rows = doc
        .bucketing
        .buckets
        .iter()
        .enumerate()
        .map(|(i, heads)| BucketRow {
            bucket: i + 1,
            heads: heads.clone(),
            mean_score: ucr.pairs[i].0,
            ucr: costs[i].ucr,
            task_cr: costs[i].task_cr,
        })
        .collect();
    let seeds: Vec<u64> = bucket_arms[0].runs.iter().map(|r| r.seed).collect();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for (j, &seed) in seeds.iter().enumerate() {
        let seed_costs: Vec<CostRatios> = bucket_arms.iter().map(|a| a.runs[j].costs).collect();
        let rep = bucket_validity(&doc.map, &doc.bucketing, &seed_costs, CostTarget::Ucr)?;
        per_seed.push((seed, rep.spearman));
    }
    Ok(Some(BucketValidity {
        rows,
        ucr,
        task_cr,
        per_seed_spearman_ucr: per_seed,
    }))
}

fn compare_zones(arms: &[ArmOutcome], m: usize) -> Option<ZoneComparison> {
    if m < 2 {
        return None;
    }
    let (risky, safe) = (bucket_arm(arms, 1)?, bucket_arm(arms, m)?);
    let per_seed: Vec<(u64, f64, f64, f64, f64)> = risky
        .runs
        .iter()
        .zip(&safe.runs)
        .map(|(r, s)| (r.seed, r.report.u, s.report.u, r.report.s, s.report.s))
        .collect();
    let col = |f: fn(&(u64, f64, f64, f64, f64)) -> f64| median(per_seed.iter().map(f).collect());
    Some(ZoneComparison {
        risky_bucket: 1,
        safe_bucket: m,
        median_risky_acc_gen: col(|r| r.1),
        median_safe_acc_gen: col(|r| r.2),
        median_risky_ref_safe: col(|r| r.3),
        median_safe_ref_safe: col(|r| r.4),
        per_seed,
    })
}

pub const ARMS_CSV_HEADER: &str =
    "arm,strategy,pcgrad,seed,trainable_heads,trainable_params,acc_gen,acc_primary,ref_safe,ref_vanilla,ref_adversarial,ucr,task_cr,frozen_intact,error";

/// Per-arm summary: one row per (arm, seed) followed by a `mean` row.
pub fn arms_csv(arms: &[ArmOutcome]) -> String {
    let mut out = String::from(ARMS_CSV_HEADER);
    out.push('\n');
    let f = |x: f64| format_sig9(x);
    let safety = |r: &EvalReport, k: &str| r.safety.get(k).map_or(String::new(), |v| f(*v));
    for arm in arms {
        let head = format!("{},{},{}", arm.name, arm.strategy.label(), arm.pcgrad);
        for r in &arm.runs {
            out.push_str(&format!(
                "{head},{},{},{},{},{},{},{},{},{},{},{},\n",
                r.seed,
                r.trainable_heads.len(),
                r.trainable_params,
                f(r.report.u),
                f(r.report.m),
                f(r.report.s),
                safety(&r.report, "vanilla-harmful"),
                safety(&r.report, "adversarial-harmful"),
                f(r.costs.ucr),
                f(r.costs.task_cr),
                r.frozen_intact
            ));
        }
        match (&arm.mean_report, &arm.mean_costs, &arm.error) {
            (Some(rep), Some(c), None) => {
                let first = &arm.runs[0];
                out.push_str(&format!(
                    "{head},mean,{},{},{},{},{},{},{},{},{},{},\n",
                    first.trainable_heads.len(),
                    first.trainable_params,
                    f(rep.u),
                    f(rep.m),
                    f(rep.s),
                    safety(rep, "vanilla-harmful"),
                    safety(rep, "adversarial-harmful"),
                    f(c.ucr),
                    f(c.task_cr),
                    arm.runs.iter().all(|r| r.frozen_intact)
                ));
            }
            (_, _, err) => {
                let msg = err.as_deref().unwrap_or("incomplete").replace([',', '\n'], ";");
                out.push_str(&format!("{head},mean,,,,,,,,,,,{msg}\n"));
            }
        }
    }
    out
}

/// Runs the whole pipeline and writes its artifacts into `out_dir`:
/// `base.ckpt`, `conflict_map.{csv,json}`, `arms.csv`, `report.json` and
/// one training history per run under `histories/`.
///
/// Arm failures are recorded in the report and do not stop other arms.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, mut log: impl FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("histories"))?;
    let mut failures = Vec::new();

    let pre = pretrain_with_progress(cfg, |e, r| log(&format!("pretrain epoch {e}: acc_gen {:.3} primary {:.3}", r.u, r.m)))?;
    if !pre.reached_target {
        failures.push(format!(
            "pretraining stopped at acc_gen {:.4} / primary {:.4}, below target {}",
            pre.report.u, pre.report.m, cfg.pretrain.target_acc
        ));
    }
    let base = pre.model;
    base.save(&out_dir.join("base.ckpt"))?;

    let doc = diagnose(&base, cfg, cfg.diagnosis.score)?;
    write_diagnosis(out_dir, &doc)?;
    log("diagnosis written");

    let suite = cfg.eval_suite()?;
    let base_report = suite.evaluate(&base)?;
    let data = cfg.alignment_set()?;
    let (util_ref, _) = cfg.calibration_sets()?;

    let mut arms = Vec::with_capacity(cfg.arms.len());
    for arm in &cfg.arms {
        let mut outcome = ArmOutcome {
            name: arm.name.clone(),
            strategy: arm.strategy,
            pcgrad: arm.pcgrad,
            runs: Vec::new(),
            mean_report: None,
            mean_costs: None,
            error: None,
        };
        for &seed in &cfg.seeds {
            match train_arm(&base, &base_report, &doc.bucketing, arm, seed, cfg, &suite, &data, &util_ref) {
                Ok(run) => {
                    let hist_path = out_dir.join("histories").join(format!("{}-{seed}.json", arm.name));
                    std::fs::write(hist_path, to_json(&run.history)?)?;
                    log(&format!(
                        "arm {} seed {seed}: acc_gen {:.3} ref_safe {:.3} ucr {:.3}",
                        arm.name, run.result.report.u, run.result.report.s, run.result.costs.ucr
                    ));
                    outcome.runs.push(run.result);
                }
                Err(e) => {
                    let msg = format!("arm {} seed {seed}: {e}", arm.name);
                    log(&msg);
                    failures.push(msg.clone());
                    outcome.error = Some(msg);
                    break;
                }
            }
        }
        if outcome.error.is_none() {
            let reports: Vec<EvalReport> = outcome.runs.iter().map(|r| r.report.clone()).collect();
            let mean = EvalReport::average(&reports)?;
            match cost_ratios(&base_report, &mean, cfg.eps) {
                Ok(c) => outcome.mean_costs = Some(c),
                Err(e) => {
                    let msg = format!("arm {}: {e}", arm.name);
                    failures.push(msg.clone());
                    outcome.error = Some(msg);
                }
            }
            outcome.mean_report = Some(mean);
        }
        arms.push(outcome);
    }

    let bucket_validity = compute_bucket_validity(&doc, &arms)?;
    let zones = compare_zones(&arms, doc.bucketing.buckets.len());
    let report = ExperimentReport {
        config: cfg.clone(),
        pretrain: PretrainSummary {
            epochs: pre.epochs,
            reached_target: pre.reached_target,
            checksum: base.checksum(),
            report: base_report,
        },
        diagnosis: doc,
        arms,
        bucket_validity,
        zones,
        failures,
    };
    std::fs::write(out_dir.join("arms.csv"), arms_csv(&report.arms))?;
    std::fs::write(out_dir.join("report.json"), to_json(&report)?)?;
    Ok(report)
}
