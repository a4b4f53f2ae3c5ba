//! Nonparametric significance testing and the aggregate arithmetic behind
//! the two summary tables.
//!
//! The Mann-Whitney U statistic is computed via midranks. Exact p-values
//! come from full enumeration of rank assignments when both samples are
//! tie-free and small; otherwise a normal approximation with continuity
//! and tie correction is used. 1-5 judge scores are heavily tied, so the
//! Track B path always takes the corrected approximation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::judge::JudgeVerdict;
use crate::metrics::{PairScores, METRIC_NAMES};

pub const ALPHA: f64 = 0.05;

/// Total sample size at or below which the exact enumeration is used
/// (tie-free data only).
pub const DEFAULT_EXACT_THRESHOLD: usize = 16;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty sample: {0}")]
    EmptySample(String),
    #[error("records missing one system's scores: {0:?}")]
    MismatchedCoverage(Vec<String>),
    #[error("verdict for record {record_id} missing dimension \"{dimension}\" for system \"{system}\"")]
    MissingDimension {
        record_id: String,
        dimension: String,
        system: String,
    },
    #[error("no verdicts to summarize")]
    NoVerdicts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UTestMethod {
    ExactEnumeration,
    NormalApproxTieCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UTestResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub method: UTestMethod,
    pub alternative: Alternative,
    /// Set when every value across both samples is identical; p is 1.
    pub degenerate: bool,
}

fn midranks(values: &[f64]) -> (Vec<f64>, f64, bool) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let t = j - i;
        if t > 1 {
            has_ties = true;
            tie_term += (t * t * t - t) as f64;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    (ranks, tie_term, has_ties)
}

/// U statistic of sample `a` (rank-sum form) over the pooled midranks.
fn u_statistic(a: &[f64], b: &[f64]) -> (f64, f64, bool) {
    let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let (ranks, tie_term, has_ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..a.len()].iter().sum();
    let na = a.len() as f64;
    let u_a = rank_sum_a - na * (na + 1.0) / 2.0;
    (u_a, tie_term, has_ties)
}

/// Exact p-value by enumerating all C(n, n_a) assignments of the tie-free
/// ranks 1..n to sample a. Two-sided p is the symmetric tail mass
/// |U - n_a·n_b/2| >= |U_obs - n_a·n_b/2|.
fn exact_p(n_a: usize, n_b: usize, u_obs: f64, alternative: Alternative) -> f64 {
    let n = n_a + n_b;
    let mean = n_a as f64 * n_b as f64 / 2.0;
    let dev_obs = (u_obs - mean).abs();
    let mut matching = 0u64;
    let mut total = 0u64;
    // iterate subsets of size n_a via combination indices
    let mut combo: Vec<usize> = (0..n_a).collect();
    loop {
        let rank_sum: usize = combo.iter().map(|&i| i + 1).sum();
        let u = rank_sum as f64 - (n_a * (n_a + 1) / 2) as f64;
        let hit = match alternative {
            Alternative::TwoSided => (u - mean).abs() >= dev_obs - 1e-9,
            Alternative::Greater => u >= u_obs - 1e-9,
            Alternative::Less => u <= u_obs + 1e-9,
        };
        if hit {
            matching += 1;
        }
        total += 1;
        // next combination
        let mut i = n_a;
        loop {
            if i == 0 {
                return matching as f64 / total as f64;
            }
            i -= 1;
            if combo[i] != i + n - n_a {
                combo[i] += 1;
                for j in i + 1..n_a {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn normal_approx_p(
    u_a: f64,
    n_a: usize,
    n_b: usize,
    tie_term: f64,
    alternative: Alternative,
) -> f64 {
    let na = n_a as f64;
    let nb = n_b as f64;
    let n = na + nb;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    // continuity correction of 0.5 toward the mean
    let p = match alternative {
        Alternative::TwoSided => {
            let z = ((u_a - mean).abs() - 0.5).max(0.0) / sd;
            2.0 * normal.cdf(-z)
        }
        Alternative::Greater => {
            let z = (u_a - mean - 0.5) / sd;
            normal.cdf(-z)
        }
        Alternative::Less => {
            let z = (u_a - mean + 0.5) / sd;
            normal.cdf(z)
        }
    };
    p.clamp(0.0, 1.0)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<UTestResult, StatsError> {
    mann_whitney_u_with_threshold(a, b, alternative, DEFAULT_EXACT_THRESHOLD)
}

pub fn mann_whitney_u_with_threshold(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
    exact_threshold: usize,
) -> Result<UTestResult, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptySample("a".into()));
    }
    if b.is_empty() {
        return Err(StatsError::EmptySample("b".into()));
    }
    let (u_a, tie_term, has_ties) = u_statistic(a, b);
    let degenerate = a
        .iter()
        .chain(b.iter())
        .all(|&v| v == a[0]);
    if degenerate {
        return Ok(UTestResult {
            u_statistic: u_a,
            p_value: 1.0,
            method: UTestMethod::NormalApproxTieCorrected,
            alternative,
            degenerate: true,
        });
    }
    let (method, p_value) = if !has_ties && a.len() + b.len() <= exact_threshold {
        (
            UTestMethod::ExactEnumeration,
            exact_p(a.len(), b.len(), u_a, alternative),
        )
    } else {
        (
            UTestMethod::NormalApproxTieCorrected,
            normal_approx_p(u_a, a.len(), b.len(), tie_term, alternative),
        )
    };
    Ok(UTestResult {
        u_statistic: u_a,
        p_value,
        method,
        alternative,
        degenerate: false,
    })
}

/// One metric row of the Track A table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub metric_name: String,
    pub baseline_mean: f64,
    pub treatment_mean: f64,
    pub difference: f64,
    /// None when the baseline mean is 0 (improvement undefined).
    pub improvement_pct: Option<f64>,
    pub p_value: f64,
    pub significant: bool,
    pub method: UTestMethod,
    /// Externally published improvement figure, when a fixture supplies one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub printed_improvement_pct: Option<f64>,
    /// True when the recomputed improvement differs from the printed one by
    /// more than 0.2 percentage points.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub printed_discrepancy: bool,
}

pub fn relative_improvement(baseline_mean: f64, treatment_mean: f64) -> (f64, Option<f64>) {
    let difference = treatment_mean - baseline_mean;
    let pct = if baseline_mean != 0.0 {
        Some(100.0 * difference / baseline_mean)
    } else {
        None
    };
    (difference, pct)
}

/// Attach a published improvement figure to a row, flagging it when the
/// recomputed value disagrees by more than 0.2 percentage points.
pub fn attach_printed_improvement(row: &mut ImprovementRow, printed_pct: f64) {
    row.printed_improvement_pct = Some(printed_pct);
    row.printed_discrepancy = match row.improvement_pct {
        Some(recomputed) => (recomputed - printed_pct).abs() > 0.2,
        None => true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackASummary {
    pub baseline_label: String,
    pub treatment_label: String,
    pub pair_count: usize,
    pub rows: Vec<ImprovementRow>,
}

/// Per-metric means per system, differences, improvements, and Mann-Whitney
/// p over the per-pair score vectors.
pub fn summarize_track_a(
    all_scores: &[PairScores],
    baseline_label: &str,
    treatment_label: &str,
    alternative: Alternative,
) -> Result<TrackASummary, StatsError> {
    let mut by_record: BTreeMap<&str, (Option<&PairScores>, Option<&PairScores>)> = BTreeMap::new();
    for s in all_scores {
        let entry = by_record.entry(&s.record_id).or_default();
        if s.system_id == baseline_label {
            entry.0 = Some(s);
        } else if s.system_id == treatment_label {
            entry.1 = Some(s);
        }
    }
    let offenders: Vec<String> = by_record
        .iter()
        .filter(|(_, (a, b))| a.is_none() || b.is_none())
        .map(|(id, _)| id.to_string())
        .collect();
    if !offenders.is_empty() {
        return Err(StatsError::MismatchedCoverage(offenders));
    }
    if by_record.is_empty() {
        return Err(StatsError::EmptySample("scores".into()));
    }
    let mut rows = Vec::new();
    for name in METRIC_NAMES {
        let baseline: Vec<f64> = by_record
            .values()
            .map(|(a, _)| a.unwrap().metric(name).unwrap())
            .collect();
        let treatment: Vec<f64> = by_record
            .values()
            .map(|(_, b)| b.unwrap().metric(name).unwrap())
            .collect();
        let baseline_mean = baseline.iter().sum::<f64>() / baseline.len() as f64;
        let treatment_mean = treatment.iter().sum::<f64>() / treatment.len() as f64;
        let (difference, improvement_pct) = relative_improvement(baseline_mean, treatment_mean);
        let test = mann_whitney_u(&treatment, &baseline, alternative)?;
        rows.push(ImprovementRow {
            metric_name: name.to_string(),
            baseline_mean,
            treatment_mean,
            difference,
            improvement_pct,
            p_value: test.p_value,
            significant: test.p_value < ALPHA,
            method: test.method,
            printed_improvement_pct: None,
            printed_discrepancy: false,
        });
    }
    Ok(TrackASummary {
        baseline_label: baseline_label.to_string(),
        treatment_label: treatment_label.to_string(),
        pair_count: by_record.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub dimension: String,
    pub baseline_mean: f64,
    pub treatment_mean: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackBSummary {
    pub baseline_label: String,
    pub treatment_label: String,
    pub verdict_count: usize,
    pub rows: Vec<DimensionRow>,
}

/// Mean per (dimension x system) and Mann-Whitney p per dimension.
pub fn summarize_track_b(
    verdicts: &[JudgeVerdict],
    dimensions: &[String],
    baseline_label: &str,
    treatment_label: &str,
    alternative: Alternative,
) -> Result<TrackBSummary, StatsError> {
    if verdicts.is_empty() {
        return Err(StatsError::NoVerdicts);
    }
    let mut rows = Vec::new();
    for dimension in dimensions {
        let mut baseline = Vec::new();
        let mut treatment = Vec::new();
        for v in verdicts {
            for (system, out) in [(baseline_label, &mut baseline), (treatment_label, &mut treatment)]
            {
                let score = v
                    .scores
                    .get(system)
                    .and_then(|m| m.get(dimension))
                    .ok_or_else(|| StatsError::MissingDimension {
                        record_id: v.record_id.clone(),
                        dimension: dimension.clone(),
                        system: system.to_string(),
                    })?;
                out.push(*score as f64);
            }
        }
        let test = mann_whitney_u(&treatment, &baseline, alternative)?;
        rows.push(DimensionRow {
            dimension: dimension.clone(),
            baseline_mean: baseline.iter().sum::<f64>() / baseline.len() as f64,
            treatment_mean: treatment.iter().sum::<f64>() / treatment.len() as f64,
            p_value: test.p_value,
            significant: test.p_value < ALPHA,
        });
    }
    Ok(TrackBSummary {
        baseline_label: baseline_label.to_string(),
        treatment_label: treatment_label.to_string(),
        verdict_count: verdicts.len(),
        rows,
    })
}
