//! Evaluation metrics: Pass@k, distinct-solution efficiency curves,
//! relative-improvement tables, orthogonality-score histograms and paired
//! bootstrap ordering checks.
//!
//! All values are kept at full precision; [`round_half_up`] and
//! [`format_percent`] are only for rendering.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::probe::ProbeSelection;

pub const DEFAULT_TAU: f64 = 0.95;
pub const SCORE_BINS: usize = 20;
const UNIT_NORM_TOL: f64 = 1e-6;

/// Fraction of problems with at least one correct sample.
pub fn pass_at_k(per_problem: &[Vec<bool>]) -> Result<f64> {
    if per_problem.is_empty() {
        return Err(Error::invalid("pass@k needs at least one problem"));
    }
    if let Some(i) = per_problem.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("problem {i} has no samples")));
    }
    let solved = per_problem.iter().filter(|s| s.iter().any(|&c| c)).count();
    Ok(solved as f64 / per_problem.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub embedding: Vec<f64>,
    pub correct: bool,
    pub token_cost: u64,
    #[serde(default)]
    pub method_tag: String,
    /// Arrival order; records are processed by ascending `order`.
    pub order: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tokens: u64,
    pub distinct: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EfficiencyCurve {
    pub points: Vec<CurvePoint>,
}

impl EfficiencyCurve {
    pub fn final_count(&self) -> usize {
        self.points.last().map_or(0, |p| p.distinct)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tokens,distinct\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.tokens, p.distinct));
        }
        s
    }
}

/// Greedy online dedup in arrival order. A correct record is new when its
/// cosine similarity to every previously accepted record is below `tau`.
/// Incorrect records only add their token cost. One curve point is emitted
/// per record.
pub fn distinct_solutions(records: &[SolutionRecord], tau: f64) -> Result<EfficiencyCurve> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1], got {tau}")));
    }
    for (i, r) in records.iter().enumerate() {
        let n = linalg::norm(&r.embedding);
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::invalid(format!("record {i} embedding has norm {n}, expected 1")));
        }
    }
    if let Some(d) = records.first().map(|r| r.embedding.len()) {
        if records.iter().any(|r| r.embedding.len() != d) {
            return Err(Error::invalid("embeddings have unequal lengths"));
        }
    }
    let mut ordered: Vec<&SolutionRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.order);

    let mut accepted: Vec<&[f64]> = Vec::new();
    let mut tokens = 0u64;
    let mut points = Vec::with_capacity(ordered.len());
    for r in ordered {
        tokens += r.token_cost;
        if r.correct && accepted.iter().all(|a| linalg::dot(a, &r.embedding) < tau) {
            accepted.push(&r.embedding);
        }
        points.push(CurvePoint {
            tokens,
            distinct: accepted.len(),
        });
    }
    Ok(EfficiencyCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeImprovement {
    /// `(ours − base) / base` per item.
    pub per_item: Vec<f64>,
    /// Mean of the per-item relatives.
    pub mean_rel: f64,
    pub mean_base: f64,
    pub mean_ours: f64,
    /// `(mean_ours − mean_base) / mean_base`, generally not `mean_rel`.
    pub rel_of_means: f64,
}

pub fn relative_improvement(baseline: &[f64], ours: &[f64]) -> Result<RelativeImprovement> {
    if baseline.len() != ours.len() {
        return Err(Error::invalid(format!(
            "{} baseline values against {} values",
            baseline.len(),
            ours.len()
        )));
    }
    if baseline.is_empty() {
        return Err(Error::invalid("no values"));
    }
    if let Some(i) = baseline.iter().position(|&b| b == 0.0) {
        return Err(Error::DivisionByZero(format!("baseline item {i} is zero")));
    }
    let per_item: Vec<f64> = baseline.iter().zip(ours).map(|(b, o)| (o - b) / b).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_base, mean_ours) = (mean(baseline), mean(ours));
    Ok(RelativeImprovement {
        mean_rel: mean(&per_item),
        per_item,
        mean_base,
        mean_ours,
        rel_of_means: (mean_ours - mean_base) / mean_base,
    })
}

/// Rows of `name,baseline,ours` with a header line. Blank lines are skipped.
pub fn parse_table_csv(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("table line {}: expected name,baseline,ours", i + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let num = |s: &str| s.trim_end_matches('%').parse::<f64>().map_err(|_| bad());
        rows.push((fields[0].to_string(), num(fields[1])?, num(fields[2])?));
    }
    if rows.is_empty() {
        return Err(Error::Format("table has no rows".into()));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `SCORE_BINS + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub per_tag: BTreeMap<String, TagStats>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Histogram of every candidate score with fixed bins over `[0, 1]`; scores
/// of exactly 1 fall in the top bin. Per-tag statistics use the chosen
/// candidate of each selection, with untagged selections under `"untagged"`.
pub fn score_distribution(selections: &[ProbeSelection]) -> Result<ScoreHistogram> {
    if selections.is_empty() {
        return Err(Error::invalid("score distribution needs at least one selection"));
    }
    let mut counts = vec![0; SCORE_BINS];
    let mut total = 0;
    let mut chosen: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for sel in selections {
        for s in sel.scores() {
            let bin = ((s.clamp(0.0, 1.0) * SCORE_BINS as f64) as usize).min(SCORE_BINS - 1);
            counts[bin] += 1;
            total += 1;
        }
        let tag = sel.tag.clone().unwrap_or_else(|| "untagged".to_string());
        chosen.entry(tag).or_default().push(sel.chosen().score);
    }
    let per_tag = chosen
        .into_iter()
        .map(|(tag, mut v)| {
            v.sort_by(f64::total_cmp);
            let stats = TagStats {
                count: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: median(&v),
            };
            (tag, stats)
        })
        .collect();
    Ok(ScoreHistogram {
        edges: (0..=SCORE_BINS).map(|i| i as f64 / SCORE_BINS as f64).collect(),
        counts,
        total,
        per_tag,
    })
}

/// Fraction of paired bootstrap resamples in which the group means are
/// strictly decreasing in the given order. All groups must have the same
/// length; each resample draws one index vector shared by all groups.
pub fn bootstrap_ordering(groups: &[&[f64]], resamples: usize, seed: u64) -> Result<f64> {
    let n = groups.first().map_or(0, |g| g.len());
    if groups.len() < 2 || n == 0 || groups.iter().any(|g| g.len() != n) {
        return Err(Error::invalid("need at least two non-empty groups of equal length"));
    }
    if resamples == 0 {
        return Err(Error::invalid("resamples must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0; n];
    let mut hits = 0;
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        let means: Vec<f64> = groups
            .iter()
            .map(|g| idx.iter().map(|&i| g[i]).sum::<f64>() / n as f64)
            .collect();
        if means.windows(2).all(|w| w[0] > w[1]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / resamples as f64)
}

/// Rounds to `decimals` places with halves going up.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let p = 10f64.powi(decimals as i32);
    (x * p + 0.5).floor() / p
}

/// `0.6237 → "+62.4%"`.
pub fn format_percent(fraction: f64) -> String {
    let v = round_half_up(fraction * 100.0, 1);
    let sign = if v > 0.0 { "+" } else { "" };
    format!("{sign}{v:.1}%")
}
