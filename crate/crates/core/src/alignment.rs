//! Budget-matched safety fine-tuning of selected heads.
//!
//! Only the query slices of the selected heads train, either directly or
//! through per-head low-rank adapters that are merged back at the end. Every
//! other parameter is left bit-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, DiffArray, Reduction, Tape};
use crate::diagnosis::Bucketing;
use crate::error::{CastError, Result};
use crate::metrics::EvalSuite;
use crate::model::{head_block, HeadId, HeadMask, LayerParam, ParamId, TransformerModel};
use crate::synthdata::Sample;

const SHUFFLE_SALT: u64 = 0x5348_5546;
const UTIL_REF_SALT: u64 = 0x5554_494c;
const ADAPTER_SALT: u64 = 0x4144_4150;

/// Which heads to train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionStrategy {
    Full,
    RandomK {
        fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    TopK {
        fraction: f64,
    },
    BottomK {
        fraction: f64,
    },
    /// 1-based bucket index; 1 is the highest-scoring bucket.
    Bucket {
        index: usize,
    },
}

impl SelectionStrategy {
    /// Head count for a fraction `k` of `n` heads: `ceil(k * n)`, at least 1.
    pub fn budget(fraction: f64, n: usize) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CastError::input(format!("fraction {fraction} outside (0, 1]")));
        }
        Ok(((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n))
    }

    /// Short label used in reports, e.g. `top_k:0.25` or `bucket:1`.
    pub fn label(&self) -> String {
        match self {
            SelectionStrategy::Full => "full".into(),
            SelectionStrategy::RandomK { fraction, .. } => format!("random_k:{fraction}"),
            SelectionStrategy::TopK { fraction } => format!("top_k:{fraction}"),
            SelectionStrategy::BottomK { fraction } => format!("bottom_k:{fraction}"),
            SelectionStrategy::Bucket { index } => format!("bucket:{index}"),
        }
    }
}

pub fn select_trainable(bucketing: &Bucketing, strategy: &SelectionStrategy) -> Result<BTreeSet<HeadId>> {
    let order = &bucketing.order;
    let n = order.len();
    Ok(match *strategy {
        SelectionStrategy::Full => order.iter().copied().collect(),
        SelectionStrategy::TopK { fraction } => order[..SelectionStrategy::budget(fraction, n)?].iter().copied().collect(),
        SelectionStrategy::BottomK { fraction } => {
            order[n - SelectionStrategy::budget(fraction, n)?..].iter().copied().collect()
        }
        SelectionStrategy::RandomK { fraction, seed } => {
            let k = SelectionStrategy::budget(fraction, n)?;
            let mut canonical = order.clone();
            canonical.sort();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            canonical.choose_multiple(&mut rng, k).copied().collect()
        }
        SelectionStrategy::Bucket { index } => {
            if index < 1 || index > bucketing.buckets.len() {
                return Err(CastError::input(format!(
                    "bucket index {index} outside [1, {}]",
                    bucketing.buckets.len()
                )));
            }
            bucketing.buckets[index - 1].iter().copied().collect()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pcgrad: bool,
    /// Adapter rank; 0 trains the query slices directly. Clamped to `d_head`.
    pub adapter_rank: usize,
    /// Utility reference samples per PCGrad step; defaults to `batch_size`.
    pub util_ref_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 1,
            batch_size: 4,
            grad_accum: 2,
            seed: 42,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pcgrad: false,
            adapter_rank: 32,
            util_ref_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CastError::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.util_ref_batch == Some(0) {
            return Err(CastError::config("epochs, batch_size, grad_accum and util_ref_batch must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(CastError::config("adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction, or plain SGD, over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            kind,
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig, n: usize) -> Self {
        Self::new(cfg.optimizer, n, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= self.lr * g),
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Low-rank update `(alpha / rank) * A * B` for one head's query slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `[d_model, rank]`, seeded normal.
    pub a: Vec<f64>,
    /// `[rank, d_head]`, zero-initialized.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: BTreeMap<HeadId, Adapter>,
}

/// Creates zero-effect adapters for `heads`; `A` entries are drawn from
/// normal(0, 1/sqrt(d_model)).
pub fn attach_adapters(model: &TransformerModel, heads: &BTreeSet<HeadId>, rank: usize, alpha: f64, seed: u64) -> Result<AdapterState> {
    let cfg = model.config();
    if rank == 0 || rank > cfg.d_head() {
        return Err(CastError::config(format!("adapter rank {rank} outside [1, {}]", cfg.d_head())));
    }
    if !(alpha > 0.0) {
        return Err(CastError::config(format!("adapter alpha must be positive, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ADAPTER_SALT);
    let normal = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt()).expect("valid std");
    let mut adapters = BTreeMap::new();
    for &h in heads {
        cfg.check_head(h)?;
        let a = (0..cfg.d_model * rank).map(|_| normal.sample(&mut rng)).collect();
        adapters.insert(
            h,
            Adapter {
                a,
                b: vec![0.0; rank * cfg.d_head()],
            },
        );
    }
    Ok(AdapterState { rank, alpha, adapters })
}

impl AdapterState {
    fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Adds every adapter's update into its head's query slice.
    pub fn merge_into(&self, model: &mut TransformerModel) -> Result<()> {
        let (d, dh, r) = (model.config().d_model, model.config().d_head(), self.rank);
        for (&h, ad) in &self.adapters {
            let delta = crate::autodiff::matmul(&ad.a, &ad.b, d, r, dh);
            let mut slice = model.head_param_slice_mut(h)?;
            for (i, x) in delta.iter().enumerate() {
                let v = slice.get(i) + self.scale() * x;
                slice.set(i, v);
            }
        }
        Ok(())
    }

    /// Logits `[batch, seq, vocab]` with the adapters applied on the fly.
    pub fn forward<P: AsRef<[usize]>>(&self, model: &TransformerModel, prompts: &[P], mask: &HeadMask) -> Result<DiffArray> {
        let batch = crate::model::Batch::new(prompts, model.config())?;
        let mut tape = Tape::new();
        let mut p = model.bind(&mut tape, |_| false);
        self.install(model, &mut tape, &mut p, false)?;
        let logits = model.forward_on_tape(&mut tape, &p, &batch, mask)?;
        DiffArray::new(
            vec![batch.batch, batch.seq, model.config().vocab_size],
            tape.value(logits).to_vec(),
        )
    }

    /// Replaces each affected layer's `W_q` binding with `W_q + adapters`;
    /// returns the `(A, B)` vars per head in map order.
    fn install(
        &self,
        model: &TransformerModel,
        tape: &mut Tape,
        p: &mut crate::model::BoundParams,
        trainable: bool,
    ) -> Result<Vec<(crate::autodiff::Var, crate::autodiff::Var)>> {
        let (d, dh, r) = (model.config().d_model, model.config().d_head(), self.rank);
        let mut vars = Vec::with_capacity(self.adapters.len());
        for (&h, ad) in &self.adapters {
            let a = tape.leaf(DiffArray::computed(vec![d, r], ad.a.clone())?, trainable);
            let b = tape.leaf(DiffArray::computed(vec![r, dh], ad.b.clone())?, trainable);
            let ab = tape.matmul(a, b)?;
            let ab = tape.scale(ab, self.scale());
            let id = ParamId::layer(h.layer, LayerParam::Wq);
            let wq = tape.add_columns(p.get(id), ab, h.head * dh)?;
            p.set(id, wq);
            vars.push((a, b));
        }
        Ok(vars)
    }
}

/// Trainable state: either raw query slices or adapters.
#[derive(Debug, Clone)]
enum Trainables {
    Direct,
    Adapters(AdapterState),
}

/// Working copy of the model plus its trainable parameters.
struct Learner {
    model: TransformerModel,
    heads: Vec<HeadId>,
    trainables: Trainables,
}

impl Learner {
    fn new(model: &TransformerModel, trainable: &BTreeSet<HeadId>, cfg: &TrainConfig) -> Result<Self> {
        if trainable.is_empty() {
            return Err(CastError::input("no trainable heads selected"));
        }
        for &h in trainable {
            model.config().check_head(h)?;
        }
        let trainables = if cfg.adapter_rank == 0 {
            Trainables::Direct
        } else {
            let rank = cfg.adapter_rank.min(model.config().d_head());
            Trainables::Adapters(attach_adapters(model, trainable, rank, rank as f64, cfg.seed)?)
        };
        Ok(Self {
            model: model.clone(),
            heads: trainable.iter().copied().collect(),
            trainables,
        })
    }

    fn flat(&self) -> Vec<f64> {
        match &self.trainables {
            Trainables::Direct => self
                .heads
                .iter()
                .flat_map(|&h| self.model.head_param_slice(h).expect("checked head").to_vec())
                .collect(),
            Trainables::Adapters(st) => st
                .adapters
                .values()
                .flat_map(|ad| ad.a.iter().chain(&ad.b).copied())
                .collect(),
        }
    }

    fn set_flat(&mut self, flat: &[f64]) {
        match &mut self.trainables {
            Trainables::Direct => {
                let n = self.model.config().d_model * self.model.config().d_head();
                for (i, &h) in self.heads.iter().enumerate() {
                    let mut s = self.model.head_param_slice_mut(h).expect("checked head");
                    s.copy_from(&flat[i * n..(i + 1) * n]);
                }
            }
            Trainables::Adapters(st) => {
                let mut off = 0;
                for ad in st.adapters.values_mut() {
                    let (na, nb) = (ad.a.len(), ad.b.len());
                    ad.a.copy_from_slice(&flat[off..off + na]);
                    ad.b.copy_from_slice(&flat[off + na..off + na + nb]);
                    off += na + nb;
                }
            }
        }
    }

    /// Mean answer-position cross-entropy over `samples` and its gradient
    /// with respect to the flat trainable vector.
    fn loss_grad(&self, samples: &[Sample]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        match &self.trainables {
            Trainables::Direct => {
                let layers: BTreeSet<usize> = self.heads.iter().map(|h| h.layer).collect();
                let wq: Vec<ParamId> = layers.iter().map(|&l| ParamId::layer(l, LayerParam::Wq)).collect();
                let p = self.model.bind(&mut tape, |id| wq.contains(&id));
                let loss = self
                    .model
                    .answer_loss(&mut tape, &p, samples, &HeadMask::none(), Reduction::Mean)?;
                tape.backward(loss)?;
                let cfg = self.model.config();
                let grad = self
                    .heads
                    .iter()
                    .flat_map(|h| head_block(tape.grad(p.get(ParamId::layer(h.layer, LayerParam::Wq))), cfg, h.head))
                    .collect();
                Ok((tape.value(loss)[0], grad))
            }
            Trainables::Adapters(st) => {
                let mut p = self.model.bind(&mut tape, |_| false);
                let vars = st.install(&self.model, &mut tape, &mut p, true)?;
                let loss = self
                    .model
                    .answer_loss(&mut tape, &p, samples, &HeadMask::none(), Reduction::Mean)?;
                tape.backward(loss)?;
                let grad = vars
                    .iter()
                    .flat_map(|&(a, b)| tape.grad(a).iter().chain(tape.grad(b)).copied().collect::<Vec<_>>())
                    .collect();
                Ok((tape.value(loss)[0], grad))
            }
        }
    }

    /// The model with any adapters merged.
    fn merged(&self) -> Result<TransformerModel> {
        let mut m = self.model.clone();
        if let Trainables::Adapters(st) = &self.trainables {
            st.merge_into(&mut m)?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub acc_gen: f64,
    pub ref_safe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub trainable_heads: Vec<HeadId>,
    pub trainable_params: usize,
    /// Mean loss of each optimizer step.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochSnapshot>,
    /// Dot product of each applied PCGrad update with the utility reference
    /// gradient; empty for plain SFT.
    pub pcgrad_dots: Vec<f64>,
    pub wall_clock_secs: f64,
}

/// Result of [`pcgrad_combine`]: the applied sum and its projected parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PcGrad {
    pub combined: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Projects each of two conflicting gradients onto the normal plane of the
/// other (both projections use the original vectors) and sums them.
pub fn pcgrad_combine(g_a: &[f64], g_b: &[f64]) -> Result<PcGrad> {
    if g_a.len() != g_b.len() {
        return Err(CastError::Dimension {
            op: "pcgrad_combine",
            lhs: vec![g_a.len()],
            rhs: vec![g_b.len()],
        });
    }
    let d = dot(g_a, g_b);
    let (mut a, mut b) = (g_a.to_vec(), g_b.to_vec());
    if d < 0.0 {
        let (na, nb) = (dot(g_a, g_a), dot(g_b, g_b));
        for i in 0..a.len() {
            a[i] -= d / nb * g_b[i];
            b[i] -= d / na * g_a[i];
        }
    }
    let combined = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    Ok(PcGrad { combined, a, b })
}

fn validate_run(data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CastError::input("alignment data is empty"));
    }
    Ok(())
}

fn run(
    model: &TransformerModel,
    data: &[Sample],
    util_ref: Option<&[Sample]>,
    trainable: &BTreeSet<HeadId>,
    cfg: &TrainConfig,
    eval: Option<&EvalSuite>,
) -> Result<(TransformerModel, TrainHistory)> {
    let started = Instant::now();
    validate_run(data, cfg)?;
    let mut learner = Learner::new(model, trainable, cfg)?;
    let mut params = learner.flat();
    let mut opt = Optimizer::from_config(cfg, params.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut util_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ UTIL_REF_SALT);
    let mut util_order: Vec<usize> = Vec::new();
    let util_batch = cfg.util_ref_batch.unwrap_or(cfg.batch_size);

    let mut history = TrainHistory {
        config: cfg.clone(),
        trainable_heads: trainable.iter().copied().collect(),
        trainable_params: params.len(),
        losses: Vec::new(),
        epochs: Vec::new(),
        pcgrad_dots: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let micro: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in micro.chunks(cfg.grad_accum) {
            let step = history.losses.len();
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for idx in group {
                let batch: Vec<Sample> = idx.iter().map(|&i| data[i].clone()).collect();
                let (l, g) = learner
                    .loss_grad(&batch)
                    .map_err(|e| CastError::Numeric(format!("step {step}: {e}")))?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let k = group.len() as f64;
            loss /= k;
            grad.iter_mut().for_each(|g| *g /= k);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CastError::Numeric(format!("non-finite loss at step {step}")));
            }
            if let Some(reference) = util_ref {
                let mut batch = Vec::with_capacity(util_batch);
                while batch.len() < util_batch {
                    if util_order.is_empty() {
                        util_order = (0..reference.len()).collect();
                        util_order.shuffle(&mut util_rng);
                    }
                    batch.push(reference[util_order.pop().expect("refilled")].clone());
                }
                let (_, g_util) = learner
                    .loss_grad(&batch)
                    .map_err(|e| CastError::Numeric(format!("step {step} utility reference: {e}")))?;
                let pc = pcgrad_combine(&grad, &g_util)?;
                history.pcgrad_dots.push(dot(&pc.combined, &g_util));
                grad = pc.combined;
            }
            opt.step(&mut params, &grad);
            learner.set_flat(&params);
            history.losses.push(loss);
        }
        if let Some(suite) = eval {
            let report = suite.evaluate(&learner.merged()?)?;
            history.epochs.push(EpochSnapshot {
                epoch: epoch + 1,
                acc_gen: report.u,
                ref_safe: report.s,
            });
        }
    }
    history.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((learner.merged()?, history))
}

/// Supervised fine-tuning of the `trainable` heads on answer-position
/// cross-entropy.
pub fn train_sft(
    model: &TransformerModel,
    data: &[Sample],
    trainable: &BTreeSet<HeadId>,
    cfg: &TrainConfig,
    eval: Option<&EvalSuite>,
) -> Result<(TransformerModel, TrainHistory)> {
    run(model, data, None, trainable, cfg, eval)
}

/// Like [`train_sft`], but each step's gradient is combined with a utility
/// reference gradient through [`pcgrad_combine`]. With `cfg.pcgrad` unset
/// this is exactly [`train_sft`].
pub fn train_pcgrad(
    model: &TransformerModel,
    data: &[Sample],
    util_ref: &[Sample],
    trainable: &BTreeSet<HeadId>,
    cfg: &TrainConfig,
    eval: Option<&EvalSuite>,
) -> Result<(TransformerModel, TrainHistory)> {
    if !cfg.pcgrad {
        return train_sft(model, data, trainable, cfg, eval);
    }
    if util_ref.is_empty() {
        return Err(CastError::input("PCGrad needs a nonempty utility reference set"));
    }
    run(model, data, Some(util_ref), trainable, cfg, eval)
}
