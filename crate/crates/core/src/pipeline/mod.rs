//! Truncate, estimate, select, stitch and resume.
//!
//! 1. The Teacher produces a greedy trace with hidden states. An optional
//!    gate checks it for spectral collapse.
//! 2. The trace is cut at a few milestones. At each cut the Teacher draws
//!    `N` short look-aheads, whose aggregated states give the local bias
//!    manifold. The Student proposes `M` probes of exactly `L` tokens, and
//!    the Teacher's last-state latent of `prefix ++ probe` is scored against
//!    the manifold.
//! 3. The chosen probe text is appended to the prefix and the Teacher
//!    resumes sampling from there. The resume budget is split evenly over
//!    the cuts, remainder to the earliest.
//!
//! Points are processed one after another in plan order and each depends
//! only on its own prefix, so dropping a point leaves the others unchanged.

pub mod backend;
pub mod synthetic;

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ManifoldSummary;
use crate::manifold::{self, aggregate_trajectory, estimate_manifold, Aggregation, MCSampleSet};
use crate::probe::{self, ProbeSelection};
use crate::spectral::{self, CollapseReport, StateTrajectory};

pub use backend::{GenerateRequest, GeneratedSequence, GenerationBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationStrategy {
    /// Cut after `Step <n>` headings, falling back to uniform fractions
    /// when there are too few.
    #[default]
    StepMarkers,
    UniformFractions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_ref: Option<String>,
    /// Token counts of the kept prefixes, strictly increasing.
    pub points: Vec<usize>,
    pub strategy: TruncationStrategy,
}

static STEP_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^[ \t]*(?:\\textbf\{|[#>*_]+[ \t]*)?Step[ \t]+\d+[ \t]*:?").expect("valid regex")
});

/// Cut points at `i/(n+1)` of the length, `i = 1..=n`, rounded to the
/// nearest token and deduplicated.
pub fn uniform_points(len: usize, n_points: usize) -> Vec<usize> {
    let mut points: Vec<usize> = (1..=n_points)
        .map(|i| ((len * i) as f64 / (n_points + 1) as f64).round() as usize)
        .filter(|&p| p < len)
        .collect();
    points.dedup();
    points
}

/// Token indices just after each `Step <n>` heading that starts a line.
pub fn step_marker_points(tokens: &[String]) -> Vec<usize> {
    let mut starts = Vec::with_capacity(tokens.len());
    let mut text = String::new();
    for t in tokens {
        starts.push(text.len());
        text.push_str(t);
    }
    let mut points: Vec<usize> = STEP_MARKER
        .find_iter(&text)
        .map(|m| starts.partition_point(|&s| s < m.end()))
        .filter(|&p| p < tokens.len())
        .collect();
    points.dedup();
    points
}

pub fn find_truncation_points(traj: &StateTrajectory, n_points: usize) -> Result<TruncationPlan> {
    plan_truncation(traj, n_points, TruncationStrategy::StepMarkers)
}

pub fn plan_truncation(
    traj: &StateTrajectory,
    n_points: usize,
    strategy: TruncationStrategy,
) -> Result<TruncationPlan> {
    if n_points == 0 {
        return Err(Error::invalid("need at least one truncation point"));
    }
    if traj.is_empty() {
        return Err(Error::invalid("cannot truncate an empty trajectory"));
    }
    if strategy == TruncationStrategy::StepMarkers {
        if let Some(tokens) = traj.token_texts() {
            let points = step_marker_points(tokens);
            if points.len() >= n_points {
                return Ok(TruncationPlan {
                    trajectory_ref: None,
                    points: points[..n_points].to_vec(),
                    strategy,
                });
            }
        }
    }
    let points = uniform_points(traj.len(), n_points);
    if points.is_empty() {
        return Err(Error::invalid(format!(
            "trajectory of {} tokens is too short to truncate",
            traj.len()
        )));
    }
    Ok(TruncationPlan {
        trajectory_ref: None,
        points,
        strategy: TruncationStrategy::UniformFractions,
    })
}

/// Splits `total` over `parts`, giving the remainder to the first parts.
pub fn split_budget(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// Intervene on every trace.
    #[default]
    Always,
    /// Intervene only when the greedy trace shows sustained collapse.
    Collapse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    #[default]
    Orthogonal,
    Random,
}

/// Run settings as stored in `run.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mc_samples: usize,
    pub candidates: usize,
    pub probe_len: usize,
    pub lookahead_tokens: usize,
    pub lookahead_temperature: f64,
    pub student_temperature: f64,
    pub resume_temperature: f64,
    pub resume_budget: usize,
    pub max_tokens: usize,
    pub truncation_points: usize,
    pub strategy: TruncationStrategy,
    pub aggregation: Aggregation,
    pub rho: f64,
    pub k_max: usize,
    pub epsilon: f64,
    pub gate: Gate,
    pub window: usize,
    pub stride: usize,
    pub theta: f64,
    pub sustain: usize,
    pub selector: SelectorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mc_samples: manifold::DEFAULT_SAMPLES,
            candidates: probe::DEFAULT_CANDIDATES,
            probe_len: probe::DEFAULT_PROBE_LEN,
            lookahead_tokens: manifold::DEFAULT_LOOKAHEAD_TOKENS,
            lookahead_temperature: 0.7,
            student_temperature: 1.0,
            resume_temperature: 0.7,
            resume_budget: 16,
            max_tokens: backend::DEFAULT_MAX_TOKENS,
            truncation_points: 3,
            strategy: TruncationStrategy::StepMarkers,
            aggregation: Aggregation::MeanPool,
            rho: manifold::DEFAULT_RHO,
            k_max: manifold::DEFAULT_K_MAX,
            epsilon: probe::DEFAULT_EPSILON,
            gate: Gate::Always,
            window: spectral::DEFAULT_WINDOW,
            stride: spectral::DEFAULT_STRIDE,
            theta: 0.5,
            sustain: 3,
            selector: SelectorKind::Orthogonal,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mc_samples", self.mc_samples),
            ("candidates", self.candidates),
            ("probe_len", self.probe_len),
            ("lookahead_tokens", self.lookahead_tokens),
            ("max_tokens", self.max_tokens),
            ("truncation_points", self.truncation_points),
            ("k_max", self.k_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be at least 2".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be finite and >= 0".into()));
        }
        if self.selector == SelectorKind::Random && self.seed.is_none() {
            return Err(Error::Config("the random selector needs a seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Greedy,
    Lookahead,
    Candidates,
    Forward,
    Resume,
    Baseline,
}

/// One backend call in the append-only provenance log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub kind: CallKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<usize>,
    pub sequences: usize,
    pub tokens_generated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumedSequence {
    pub point: usize,
    pub probe_index: usize,
    pub sample_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_seed: Option<u64>,
    pub text: String,
    pub token_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum PointStatus {
    Ok,
    NoCandidates,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point: usize,
    pub token_index: usize,
    pub status: PointStatus,
    pub budget: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifold: Option<ManifoldSummary>,
    /// Orthogonality of each look-ahead sample against its own manifold.
    pub mc_self_scores: Vec<f64>,
    pub rejected_candidates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<ProbeSelection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stitched_context: Option<String>,
    pub resumed: Vec<ResumedSequence>,
}

impl PointResult {
    fn new(point: usize, token_index: usize, budget: usize) -> Self {
        Self {
            point,
            token_index,
            status: PointStatus::Ok,
            budget,
            manifold: None,
            mc_self_scores: Vec::new(),
            rejected_candidates: 0,
            selection: None,
            stitched_context: None,
            resumed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoeRunResult {
    pub greedy_text: String,
    pub greedy_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_report: Option<CollapseReport>,
    pub intervened: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<TruncationPlan>,
    pub points: Vec<PointResult>,
    pub calls: Vec<CallRecord>,
    pub total_tokens: usize,
}

impl SoeRunResult {
    fn empty() -> Self {
        Self {
            greedy_text: String::new(),
            greedy_tokens: 0,
            gate_report: None,
            intervened: false,
            plan: None,
            points: Vec::new(),
            calls: Vec::new(),
            total_tokens: 0,
        }
    }

    pub fn resumed(&self) -> impl Iterator<Item = &ResumedSequence> {
        self.points.iter().flat_map(|p| &p.resumed)
    }

    /// Fills correctness labels with an external judge.
    pub fn label_with(&mut self, mut judge: impl FnMut(&str) -> Option<bool>) {
        for p in &mut self.points {
            for r in &mut p.resumed {
                r.correct = judge(&r.text);
            }
        }
    }
}

/// A backend failure, with everything gathered up to that point.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct PipelineError {
    pub error: Error,
    pub partial: Box<SoeRunResult>,
}

struct Recorder {
    result: SoeRunResult,
}

impl Recorder {
    fn log(&mut self, role: Role, kind: CallKind, point: Option<usize>, seqs: &[GeneratedSequence], seed: Option<u64>) {
        let tokens: usize = seqs.iter().map(GeneratedSequence::token_count).sum();
        self.result.total_tokens += tokens;
        self.result.calls.push(CallRecord {
            role,
            kind,
            point,
            sequences: seqs.len(),
            tokens_generated: tokens,
            backend_seed: seed,
        });
    }

    fn log_forward(&mut self, point: usize, seed: Option<u64>) {
        self.result.calls.push(CallRecord {
            role: Role::Teacher,
            kind: CallKind::Forward,
            point: Some(point),
            sequences: 0,
            tokens_generated: 0,
            backend_seed: seed,
        });
    }
}

fn generate(
    backend: &mut dyn GenerationBackend,
    context: &str,
    temperature: f64,
    n: usize,
    max_tokens: usize,
    want_states: bool,
) -> Result<Vec<GeneratedSequence>> {
    backend.generate(&GenerateRequest {
        context: context.to_string(),
        temperature,
        n,
        max_tokens,
        want_states,
    })
}

fn fail(error: Error, rec: Recorder) -> PipelineError {
    PipelineError {
        error,
        partial: Box::new(rec.result),
    }
}

/// Runs the full procedure on one problem.
pub fn run_soe(
    problem_context: &str,
    teacher: &mut dyn GenerationBackend,
    student: &mut dyn GenerationBackend,
    config: &RunConfig,
) -> std::result::Result<SoeRunResult, PipelineError> {
    let mut rec = Recorder {
        result: SoeRunResult::empty(),
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, rec));
    }

    let greedy = match generate(teacher, problem_context, 0.0, 1, config.max_tokens, true) {
        Ok(mut seqs) if seqs.len() == 1 => seqs.remove(0),
        Ok(_) => return Err(fail(Error::Backend("greedy call returned no sequence".into()), rec)),
        Err(e) => return Err(fail(e, rec)),
    };
    rec.log(Role::Teacher, CallKind::Greedy, None, std::slice::from_ref(&greedy), teacher.seed());
    rec.result.greedy_text = greedy.text.clone();
    rec.result.greedy_tokens = greedy.token_count();
    let states = match greedy.states.clone() {
        Some(s) if s.token_texts().is_some() => s,
        Some(s) => match s.with_tokens(greedy.tokens.clone()) {
            Ok(s) => s,
            Err(e) => return Err(fail(Error::Backend(format!("greedy states: {e}")), rec)),
        },
        None => return Err(fail(Error::Backend("greedy trace has no states".into()), rec)),
    };

    if config.gate == Gate::Collapse {
        let window = config.window.min(states.len());
        let report = spectral::effrank_series(&states, window, config.stride.max(1)).and_then(|mut r| {
            r.apply_detection(config.theta, config.sustain)?;
            Ok(r)
        });
        // A trace too short for the monitor counts as not collapsed.
        let detected = report.as_ref().ok().and_then(|r| r.detection_step).is_some();
        rec.result.gate_report = report.ok();
        if !detected {
            return Ok(rec.result);
        }
    }
    rec.result.intervened = true;

    let plan = match plan_truncation(&states, config.truncation_points, config.strategy) {
        Ok(p) => p,
        Err(e) => return Err(fail(e, rec)),
    };
    let budgets = split_budget(config.resume_budget, plan.points.len());
    rec.result.plan = Some(plan.clone());

    for (i, (&cut, &budget)) in plan.points.iter().zip(&budgets).enumerate() {
        let prefix = format!("{problem_context}{}", greedy.tokens[..cut].concat());
        let mut point = PointResult::new(i, cut, budget);
        match run_point(&prefix, &mut point, teacher, student, config, &mut rec) {
            Ok(()) => {}
            Err(Error::NoCandidates) => point.status = PointStatus::NoCandidates,
            Err(e @ Error::Backend(_)) => {
                point.status = PointStatus::Failed(e.to_string());
                rec.result.points.push(point);
                return Err(fail(e, rec));
            }
            Err(e) => point.status = PointStatus::Failed(e.to_string()),
        }
        rec.result.points.push(point);
    }
    Ok(rec.result)
}

fn run_point(
    prefix: &str,
    point: &mut PointResult,
    teacher: &mut dyn GenerationBackend,
    student: &mut dyn GenerationBackend,
    config: &RunConfig,
    rec: &mut Recorder,
) -> Result<()> {
    let idx = point.point;

    let looks = generate(
        teacher,
        prefix,
        config.lookahead_temperature,
        config.mc_samples,
        config.lookahead_tokens,
        true,
    )?;
    rec.log(Role::Teacher, CallKind::Lookahead, Some(idx), &looks, teacher.seed());
    let mut samples = Vec::with_capacity(looks.len());
    for (j, seq) in looks.iter().enumerate() {
        let states = seq
            .states
            .as_ref()
            .ok_or_else(|| Error::Backend(format!("look-ahead {j} has no states")))?;
        let rows: Vec<&[f64]> = states.states().collect();
        samples.push(aggregate_trajectory(&rows, config.aggregation)?);
    }
    if samples.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::Backend("look-ahead states have mixed dimensions".into()));
    }
    let set = MCSampleSet::new(samples, config.aggregation, config.lookahead_temperature)?;
    let manifold = estimate_manifold(&set, config.rho, config.k_max)?;
    point.manifold = Some(ManifoldSummary::from(&manifold));
    point.mc_self_scores = set
        .samples
        .iter()
        .map(|s| probe::orthogonality_score(s, &manifold, config.epsilon))
        .collect::<Result<_>>()?;

    let proposals = generate(
        student,
        prefix,
        config.student_temperature,
        config.candidates,
        config.probe_len,
        false,
    )?;
    rec.log(Role::Student, CallKind::Candidates, Some(idx), &proposals, student.seed());
    let mut candidates = Vec::new();
    for seq in proposals {
        if seq.tokens.len() < config.probe_len {
            point.rejected_candidates += 1;
            continue;
        }
        let tokens = seq.tokens[..config.probe_len].to_vec();
        let latent = teacher.forward(&format!("{prefix}{}", tokens.concat()))?;
        rec.log_forward(idx, teacher.seed());
        if latent.len() != manifold.dim() {
            return Err(Error::Backend(format!(
                "forward latent has dimension {}, states have {}",
                latent.len(),
                manifold.dim()
            )));
        }
        candidates.push((tokens, latent));
    }
    let mut selection = match (config.selector, config.seed) {
        (SelectorKind::Random, Some(seed)) => {
            probe::random_select(candidates, &manifold, config.epsilon, seed.wrapping_add(idx as u64))?
        }
        _ => probe::select_probe(candidates, &manifold, config.epsilon)?,
    };
    selection.tag = Some(format!("point-{idx}"));
    let stitched = format!("{prefix}{}", selection.chosen().tokens.concat());
    let probe_index = selection.chosen_index;
    point.selection = Some(selection);
    point.stitched_context = Some(stitched.clone());

    if point.budget > 0 {
        let resumed = generate(
            teacher,
            &stitched,
            config.resume_temperature,
            point.budget,
            config.max_tokens,
            false,
        )?;
        let seed = teacher.seed();
        rec.log(Role::Teacher, CallKind::Resume, Some(idx), &resumed, seed);
        point.resumed = resumed
            .into_iter()
            .enumerate()
            .map(|(k, seq)| ResumedSequence {
                point: idx,
                probe_index,
                sample_index: k,
                backend_seed: seed,
                token_count: seq.token_count(),
                text: seq.text,
                correct: None,
            })
            .collect();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub sequences: Vec<ResumedSequence>,
    pub calls: Vec<CallRecord>,
    pub total_tokens: usize,
}

/// `n` plain Teacher samples at the resume temperature.
pub fn run_baseline(
    problem_context: &str,
    teacher: &mut dyn GenerationBackend,
    n: usize,
    config: &RunConfig,
) -> Result<BaselineResult> {
    if n == 0 {
        return Err(Error::invalid("baseline needs n >= 1"));
    }
    let seqs = generate(teacher, problem_context, config.resume_temperature, n, config.max_tokens, false)?;
    let mut rec = Recorder {
        result: SoeRunResult::empty(),
    };
    let seed = teacher.seed();
    rec.log(Role::Teacher, CallKind::Baseline, None, &seqs, seed);
    Ok(BaselineResult {
        sequences: seqs
            .into_iter()
            .enumerate()
            .map(|(k, s)| ResumedSequence {
                point: 0,
                probe_index: 0,
                sample_index: k,
                backend_seed: seed,
                token_count: s.token_count(),
                text: s.text,
                correct: None,
            })
            .collect(),
        calls: rec.result.calls,
        total_tokens: rec.result.total_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn budget_split() {
        assert_eq!(split_budget(16, 3), vec![6, 5, 5]);
        assert_eq!(split_budget(2, 3), vec![1, 1, 0]);
        assert_eq!(split_budget(9, 3), vec![3, 3, 3]);
        assert!(split_budget(4, 0).is_empty());
    }

    #[test]
    fn uniform_fallback() {
        assert_eq!(uniform_points(100, 3), vec![25, 50, 75]);
        assert_eq!(uniform_points(1, 3), vec![0]);
        let traj = StateTrajectory::new(1, vec![0.0; 100]).unwrap();
        let plan = find_truncation_points(&traj, 3).unwrap();
        assert_eq!(plan.points, vec![25, 50, 75]);
        assert_eq!(plan.strategy, TruncationStrategy::UniformFractions);
    }

    #[test]
    fn markers() {
        let t = toks(&["Step", " 1", ":", " a", "\n", "Step 2:", " b", "\nStep 3: c", " d"]);
        assert_eq!(step_marker_points(&t), vec![3, 6, 8]);
        let not_line_start = toks(&["a Step 1:", " b"]);
        assert!(step_marker_points(&not_line_start).is_empty());
        let bold = toks(&["**Step 1:**", " x", "\n\\textbf{Step 2:", " y"]);
        assert_eq!(step_marker_points(&bold), vec![1, 3]);
        let at_end = toks(&["x", "\nStep 9:"]);
        assert!(step_marker_points(&at_end).is_empty());
    }

    #[test]
    fn plan_prefers_markers() {
        let t = toks(&["Step 1:", " a", "\nStep 2:", " b", "\nStep 3:", " c", "\nStep 4:", " d"]);
        let traj = StateTrajectory::new(1, vec![0.0; t.len()]).unwrap().with_tokens(t).unwrap();
        let plan = find_truncation_points(&traj, 3).unwrap();
        assert_eq!(plan.points, vec![1, 3, 5]);
        assert_eq!(plan.strategy, TruncationStrategy::StepMarkers);
        let five = find_truncation_points(&traj, 5).unwrap();
        assert_eq!(five.strategy, TruncationStrategy::UniformFractions);
        assert!(find_truncation_points(&traj, 0).is_err());
        let empty = StateTrajectory::new(1, vec![]).unwrap();
        assert!(matches!(find_truncation_points(&empty, 3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let random = RunConfig {
            selector: SelectorKind::Random,
            ..RunConfig::default()
        };
        assert!(random.validate().is_err());
        let one = RunConfig {
            mc_samples: 1,
            ..RunConfig::default()
        };
        assert!(one.validate().is_err());
    }
}
