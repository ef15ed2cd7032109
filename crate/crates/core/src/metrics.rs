//! Evaluation reports, cost ratios and correlation statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diagnosis::{percentile_rank, Bucketing, ConflictMap};
use crate::error::{CastError, Result};
use crate::model::{evaluate_refusal, evaluate_utility, HeadMask, NextTokenPredictor};
use crate::synthdata::{Dataset, SafetySet, TaskKind, UtilitySet};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Held-out sets a model is scored on.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub utility: Vec<UtilitySet>,
    pub safety: Vec<SafetySet>,
}

impl EvalSuite {
    pub fn validate(&self) -> Result<()> {
        if self.utility.is_empty() || self.safety.is_empty() {
            return Err(CastError::config("evaluation needs at least one utility and one safety set"));
        }
        if self.utility.iter().any(|s| s.is_empty()) || self.safety.iter().any(|s| s.is_empty()) {
            return Err(CastError::config("evaluation sets must be nonempty"));
        }
        if !self.utility.iter().any(|s| s.kind == TaskKind::ModularAdd) {
            return Err(CastError::config("evaluation needs a modular-add set for the primary task"));
        }
        Ok(())
    }

    pub fn evaluate<M: NextTokenPredictor + ?Sized>(&self, model: &M) -> Result<EvalReport> {
        self.validate()?;
        let none = HeadMask::none();
        let mut utility = BTreeMap::new();
        for set in &self.utility {
            utility.insert(set.kind.name().to_string(), evaluate_utility(model, set.samples(), &none)?);
        }
        let mut safety = BTreeMap::new();
        for set in &self.safety {
            safety.insert(split_name(set).to_string(), evaluate_refusal(model, set.samples(), &none)?);
        }
        EvalReport::new(utility, safety)
    }
}

fn split_name(set: &SafetySet) -> &'static str {
    if set.adversarial {
        "adversarial-harmful"
    } else {
        "vanilla-harmful"
    }
}

/// Accuracy per utility task and refusal per harmful split, with their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utility: BTreeMap<String, f64>,
    /// Mean utility accuracy.
    pub u: f64,
    /// Primary-task (modular-add) accuracy.
    pub m: f64,
    pub safety: BTreeMap<String, f64>,
    /// Mean refusal rate.
    pub s: f64,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

impl EvalReport {
    pub fn new(utility: BTreeMap<String, f64>, safety: BTreeMap<String, f64>) -> Result<Self> {
        let m = *utility
            .get(TaskKind::ModularAdd.name())
            .ok_or_else(|| CastError::config("report lacks the modular-add task"))?;
        if safety.is_empty() {
            return Err(CastError::config("report lacks safety splits"));
        }
        Ok(Self {
            u: mean(utility.values().copied()),
            m,
            s: mean(safety.values().copied()),
            utility,
            safety,
        })
    }

    /// Component-wise mean of several reports with identical keys.
    pub fn average(reports: &[EvalReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| CastError::input("no reports to average"))?;
        let avg = |get: &dyn Fn(&EvalReport) -> &BTreeMap<String, f64>| -> Result<BTreeMap<String, f64>> {
            get(first)
                .keys()
                .map(|k| {
                    let vals = reports
                        .iter()
                        .map(|r| get(r).get(k).copied().ok_or_else(|| CastError::input(format!("report lacks {k}"))))
                        .collect::<Result<Vec<f64>>>()?;
                    Ok((k.clone(), mean(vals.into_iter())))
                })
                .collect()
        };
        Self::new(avg(&|r| &r.utility)?, avg(&|r| &r.safety)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRatios {
    /// Utility loss per unit of safety gain.
    pub ucr: f64,
    /// Primary-task loss per unit of safety gain.
    pub task_cr: f64,
    pub eps: f64,
}

/// `max(0, (before - after) / ((safety_after - safety_before) + eps))`.
pub fn cost_ratio(before: f64, after: f64, safety_after: f64, safety_before: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(CastError::input(format!("eps must be positive, got {eps}")));
    }
    let num = before - after;
    if num <= 0.0 {
        return Ok(0.0);
    }
    let ratio = num / ((safety_after - safety_before) + eps);
    if ratio.is_nan() || ratio.is_infinite() {
        return Err(CastError::Numeric(format!(
            "cost ratio undefined: utility drop {num} over zero safety change"
        )));
    }
    Ok(ratio.max(0.0))
}

pub fn cost_ratios(base: &EvalReport, aligned: &EvalReport, eps: f64) -> Result<CostRatios> {
    Ok(CostRatios {
        ucr: cost_ratio(base.u, aligned.u, aligned.s, base.s, eps)?,
        task_cr: cost_ratio(base.m, aligned.m, aligned.s, base.s, eps)?,
        eps,
    })
}

fn check_pairs(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(CastError::Dimension {
            op: "correlation",
            lhs: vec![xs.len()],
            rhs: vec![ys.len()],
        });
    }
    if xs.len() < 2 {
        return Err(CastError::input("correlation needs at least 2 pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(CastError::input("correlation of non-finite values"));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pairs(xs, ys)?;
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CastError::UndefinedCorrelation(format!(
            "zero variance in {}",
            if sxx == 0.0 { "x" } else { "y" }
        )));
    }
    // sqrt of the product keeps identical inputs at exactly 1.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of the tie-averaged fractional ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pairs(xs, ys)?;
    pearson(&percentile_rank(xs)?, &percentile_rank(ys)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostTarget {
    Ucr,
    TaskCr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub target: CostTarget,
    /// `None` when undefined; `undefined` then says why.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub undefined: Option<String>,
    /// `(bucket mean score, realized cost)` per bucket.
    pub pairs: Vec<(f64, f64)>,
}

/// Correlates raw `(x, y)` pairs, surfacing zero variance instead of failing.
pub fn correlate(pairs: Vec<(f64, f64)>, target: CostTarget) -> Result<CorrelationReport> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let soften = |r: Result<f64>| match r {
        Ok(v) => Ok((Some(v), None)),
        Err(CastError::UndefinedCorrelation(why)) => Ok((None, Some(why))),
        Err(e) => Err(e),
    };
    let (p, why_p) = soften(pearson(&xs, &ys))?;
    let (s, why_s) = soften(spearman(&xs, &ys))?;
    Ok(CorrelationReport {
        target,
        pearson: p,
        spearman: s,
        undefined: why_p.or(why_s),
        pairs,
    })
}

/// Correlates each bucket's mean score (under the bucketing's own variant)
/// with its realized cost ratio.
pub fn bucket_validity(
    map: &ConflictMap,
    bucketing: &Bucketing,
    costs: &[CostRatios],
    target: CostTarget,
) -> Result<CorrelationReport> {
    if costs.len() != bucketing.buckets.len() {
        return Err(CastError::input(format!(
            "{} cost ratios for {} buckets",
            costs.len(),
            bucketing.buckets.len()
        )));
    }
    let pairs = bucketing
        .buckets
        .iter()
        .zip(costs)
        .map(|(bucket, cost)| {
            let scores = bucket
                .iter()
                .map(|h| {
                    map.record(*h)
                        .map(|r| r.score(bucketing.variant))
                        .ok_or_else(|| CastError::input(format!("head {h} missing from conflict map")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let y = match target {
                CostTarget::Ucr => cost.ucr,
                CostTarget::TaskCr => cost.task_cr,
            };
            Ok((mean(scores.into_iter()), y))
        })
        .collect::<Result<Vec<_>>>()?;
    correlate(pairs, target)
}
