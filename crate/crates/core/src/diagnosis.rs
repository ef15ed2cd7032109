//! Head-level conflict diagnosis.
//!
//! For every head: the optimization conflict `o` between the safety and
//! utility gradients of its query slice, the accuracy shifts caused by
//! ablating it, their percentile ranks across all heads, the functional
//! sensitivity `s = exp(rank_gen - rank_safe)` and the conflict score
//! `c = o * s`. Heads are then split into equal-size buckets by descending
//! score.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape};
use crate::error::{CastError, Result};
use crate::model::{evaluate_refusal, evaluate_utility, head_block, HeadId, HeadMask, LayerParam, ParamId, TransformerModel};
use crate::synthdata::{Sample, REFUSE};

/// Norm below which a head gradient carries no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Conflict assigned to heads with a degenerate gradient.
pub const DEGENERATE_CONFLICT: f64 = 0.5;
const GRAD_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Harmful prompts, every target `REFUSE`.
    Safe,
    /// Task prompts with their answers.
    Util,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub head: HeadId,
    pub vector: Vec<f64>,
}

impl HeadGradient {
    pub fn norm(&self) -> f64 {
        crate::autodiff::dot(&self.vector, &self.vector).sqrt()
    }
}

/// Gradient of the summed answer-position cross-entropy with respect to every
/// head's query slice, in `(layer, head)` order. The model is not modified.
pub fn compute_head_gradients(model: &TransformerModel, samples: &[Sample], objective: Objective) -> Result<Vec<HeadGradient>> {
    if samples.is_empty() {
        return Err(CastError::input("gradient calibration set is empty"));
    }
    let refusing = samples.iter().filter(|s| s.target == REFUSE).count();
    let consistent = match objective {
        Objective::Safe => refusing == samples.len(),
        Objective::Util => refusing == 0,
    };
    if !consistent {
        return Err(CastError::input(format!(
            "{objective:?} objective expects {} targets",
            if objective == Objective::Safe { "only REFUSE" } else { "no REFUSE" }
        )));
    }
    let cfg = model.config();
    let wq_ids: Vec<ParamId> = (0..cfg.n_layers).map(|l| ParamId::layer(l, LayerParam::Wq)).collect();
    let mut wq_grads = vec![vec![0.0; cfg.d_model * cfg.d_model]; cfg.n_layers];
    for (bi, chunk) in samples.chunks(GRAD_BATCH).enumerate() {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |id| wq_ids.contains(&id));
        let loss = model
            .answer_loss(&mut tape, &p, chunk, &HeadMask::none(), Reduction::Sum)
            .map_err(|e| match e {
                CastError::Numeric(m) => CastError::Numeric(format!("calibration batch {bi}: {m}")),
                other => other,
            })?;
        tape.backward(loss)?;
        for (acc, id) in wq_grads.iter_mut().zip(&wq_ids) {
            for (a, g) in acc.iter_mut().zip(tape.grad(p.get(*id))) {
                *a += g;
            }
        }
    }
    Ok(cfg
        .heads()
        .map(|h| HeadGradient {
            head: h,
            vector: head_block(&wq_grads[h.layer], cfg, h.head),
        })
        .collect())
}

/// Normalized cosine distance `(1 - cos) / 2`, clamped to `[0, 1]`.
///
/// Returns [`CastError::DegenerateGradient`] when either norm is below
/// [`DEGENERATE_NORM`]; callers substitute [`DEGENERATE_CONFLICT`].
pub fn optimization_conflict(g_safe: &HeadGradient, g_util: &HeadGradient) -> Result<f64> {
    if g_safe.head != g_util.head {
        return Err(CastError::input(format!(
            "gradients belong to different heads ({} vs {})",
            g_safe.head, g_util.head
        )));
    }
    conflict_of_vectors(&g_safe.vector, &g_util.vector, g_safe.head)
}

fn conflict_of_vectors(a: &[f64], b: &[f64], head: HeadId) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CastError::Dimension {
            op: "optimization_conflict",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na, nb) = (crate::autodiff::dot(a, a).sqrt(), crate::autodiff::dot(b, b).sqrt());
    for (which, n) in [("safety", na), ("utility", nb)] {
        if n < DEGENERATE_NORM {
            return Err(CastError::DegenerateGradient {
                what: format!("{which} gradient of {head}"),
                norm: n,
            });
        }
    }
    let cos = crate::autodiff::dot(a, b) / (na * nb);
    Ok(((1.0 - cos) / 2.0).clamp(0.0, 1.0))
}

/// Unmasked accuracy and refusal, computed once per diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub acc_gen: f64,
    pub ref_safe: f64,
}

impl Baseline {
    pub fn compute(model: &TransformerModel, util: &[Sample], safe: &[Sample]) -> Result<Self> {
        let none = HeadMask::none();
        Ok(Self {
            acc_gen: evaluate_utility(model, util, &none)?,
            ref_safe: evaluate_refusal(model, safe, &none)?,
        })
    }
}

/// `(h_gen, h_safe)`: absolute accuracy and refusal shifts when `h` is masked.
pub fn ablation_sensitivity(
    model: &TransformerModel,
    h: HeadId,
    util: &[Sample],
    safe: &[Sample],
    baseline: &Baseline,
) -> Result<(f64, f64)> {
    model.config().check_head(h)?;
    let mask = HeadMask::single(h);
    let acc = evaluate_utility(model, util, &mask)?;
    let refusal = evaluate_refusal(model, safe, &mask)?;
    Ok(((acc - baseline.acc_gen).abs(), (refusal - baseline.ref_safe).abs()))
}

/// Ascending fractional ranks `rank / (N - 1)`, ties sharing the mean of
/// their positional ranks.
pub fn percentile_rank(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 {
        return Err(CastError::input(format!("percentile rank needs at least 2 values, got {n}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(CastError::input("percentile rank of NaN"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg / (n - 1) as f64;
        }
        start = end;
    }
    Ok(ranks)
}

/// `exp(rank_gen - rank_safe)`.
pub fn functional_sensitivity(rank_gen: f64, rank_safe: f64) -> Result<f64> {
    for r in [rank_gen, rank_safe] {
        if !(0.0..=1.0).contains(&r) {
            return Err(CastError::input(format!("rank {r} outside [0, 1]")));
        }
    }
    Ok((rank_gen - rank_safe).exp())
}

/// `o * s`.
pub fn conflict_score(o: f64, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&o) || !(s > 0.0) {
        return Err(CastError::input(format!("conflict score needs o in [0, 1] and s > 0, got o={o}, s={s}")));
    }
    Ok(o * s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub layer: usize,
    pub head: usize,
    pub o: f64,
    pub h_gen: f64,
    pub h_safe: f64,
    pub rank_gen: f64,
    pub rank_safe: f64,
    pub s: f64,
    pub c: f64,
}

impl ConflictRecord {
    /// Derives `s` and `c` from the raw measurements.
    pub fn new(head: HeadId, o: f64, h_gen: f64, h_safe: f64, rank_gen: f64, rank_safe: f64) -> Result<Self> {
        let s = functional_sensitivity(rank_gen, rank_safe)?;
        let c = conflict_score(o, s)?;
        Ok(Self {
            layer: head.layer,
            head: head.head,
            o,
            h_gen,
            h_safe,
            rank_gen,
            rank_safe,
            s,
            c,
        })
    }

    pub fn head_id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }

    pub fn score(&self, variant: ScoreVariant) -> f64 {
        match variant {
            ScoreVariant::Unified => self.c,
            ScoreVariant::OOnly => self.o,
            ScoreVariant::SOnly => self.s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapProvenance {
    pub model_checksum: String,
    pub util_samples: usize,
    pub safe_samples: usize,
    /// Seeds of the calibration generators, when known to the caller.
    pub calibration_seeds: Vec<u64>,
    pub baseline: Baseline,
    /// Heads whose conflict fell back to the degenerate default.
    pub degenerate_heads: Vec<HeadId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictMap {
    pub records: Vec<ConflictRecord>,
    pub provenance: MapProvenance,
}

impl ConflictMap {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, h: HeadId) -> Option<&ConflictRecord> {
        self.records.iter().find(|r| r.head_id() == h)
    }
}

/// Runs the full per-head diagnosis. Ranks are taken over all heads of the
/// model jointly.
pub fn build_conflict_map(model: &TransformerModel, util: &[Sample], safe: &[Sample]) -> Result<ConflictMap> {
    let g_util = compute_head_gradients(model, util, Objective::Util)?;
    let g_safe = compute_head_gradients(model, safe, Objective::Safe)?;
    let baseline = Baseline::compute(model, util, safe)?;

    let mut degenerate = Vec::new();
    let mut o = Vec::with_capacity(g_util.len());
    let mut h_gen = Vec::with_capacity(g_util.len());
    let mut h_safe = Vec::with_capacity(g_util.len());
    for (gs, gu) in g_safe.iter().zip(&g_util) {
        match optimization_conflict(gs, gu) {
            Ok(v) => o.push(v),
            Err(CastError::DegenerateGradient { .. }) => {
                degenerate.push(gs.head);
                o.push(DEGENERATE_CONFLICT);
            }
            Err(e) => return Err(e),
        }
        let (g, s) = ablation_sensitivity(model, gs.head, util, safe, &baseline)?;
        h_gen.push(g);
        h_safe.push(s);
    }
    let rank_gen = percentile_rank(&h_gen)?;
    let rank_safe = percentile_rank(&h_safe)?;
    let records = g_util
        .iter()
        .enumerate()
        .map(|(i, g)| ConflictRecord::new(g.head, o[i], h_gen[i], h_safe[i], rank_gen[i], rank_safe[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConflictMap {
        records,
        provenance: MapProvenance {
            model_checksum: model.checksum(),
            util_samples: util.len(),
            safe_samples: safe.len(),
            calibration_seeds: Vec::new(),
            baseline,
            degenerate_heads: degenerate,
        },
    })
}

/// Which per-head quantity orders the buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    #[default]
    Unified,
    OOnly,
    SOnly,
}

impl ScoreVariant {
    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::Unified => "unified",
            ScoreVariant::OOnly => "o_only",
            ScoreVariant::SOnly => "s_only",
        }
    }
}

impl FromStr for ScoreVariant {
    type Err = CastError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(ScoreVariant::Unified),
            "o_only" => Ok(ScoreVariant::OOnly),
            "s_only" => Ok(ScoreVariant::SOnly),
            other => Err(CastError::config(format!(
                "unknown score variant {other:?} (expected unified, o_only or s_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucketing {
    pub variant: ScoreVariant,
    /// All heads by descending score, ties by ascending `(layer, head)`.
    pub order: Vec<HeadId>,
    /// `buckets[0]` is the highest-scoring (risky) bucket.
    pub buckets: Vec<Vec<HeadId>>,
}

impl Bucketing {
    pub fn n_heads(&self) -> usize {
        self.order.len()
    }

    /// 1-based bucket of `h`.
    pub fn bucket_of(&self, h: HeadId) -> Option<usize> {
        self.buckets.iter().position(|b| b.contains(&h)).map(|i| i + 1)
    }

    /// 1-based position of `h` in the descending order.
    pub fn rank_of(&self, h: HeadId) -> Option<usize> {
        self.order.iter().position(|&x| x == h).map(|i| i + 1)
    }
}

/// Splits heads into `m` buckets of sizes differing by at most one, larger
/// buckets first.
pub fn bucketize(map: &ConflictMap, m: usize, variant: ScoreVariant) -> Result<Bucketing> {
    let n = map.len();
    if m < 1 || m > n {
        return Err(CastError::input(format!("bucket count {m} outside [1, {n}]")));
    }
    let mut recs: Vec<&ConflictRecord> = map.records.iter().collect();
    recs.sort_by(|a, b| {
        b.score(variant)
            .total_cmp(&a.score(variant))
            .then_with(|| a.head_id().cmp(&b.head_id()))
    });
    let order: Vec<HeadId> = recs.iter().map(|r| r.head_id()).collect();
    let (base, extra) = (n / m, n % m);
    let mut buckets = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let size = base + usize::from(i < extra);
        buckets.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(Bucketing {
        variant,
        order,
        buckets,
    })
}

pub const CSV_HEADER: &str = "layer,head,o,h_gen,h_safe,rank_gen,rank_safe,s,c,rank,bucket";

/// Formats like C's `%.9g`: 9 significant digits, trailing zeros removed,
/// exponent form outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    strip_zeros(&format!("{x:.decimals$}")).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// The conflict map as CSV rows in `(layer, head)` order, with the rank and
/// bucket columns taken from `bucketing`.
pub fn conflict_map_csv(map: &ConflictMap, bucketing: &Bucketing) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &map.records {
        let h = r.head_id();
        let (rank, bucket) = bucketing
            .rank_of(h)
            .zip(bucketing.bucket_of(h))
            .ok_or_else(|| CastError::input(format!("head {h} missing from bucketing")))?;
        let floats = [r.o, r.h_gen, r.h_safe, r.rank_gen, r.rank_safe, r.s, r.c].map(format_sig9);
        writeln!(out, "{},{},{},{rank},{bucket}", r.layer, r.head, floats.join(",")).expect("string write");
    }
    Ok(out)
}

/// Companion document for the CSV: records, provenance and bucketing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictMapDocument {
    pub map: ConflictMap,
    pub bucketing: Bucketing,
}
