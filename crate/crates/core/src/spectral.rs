//! Sliding-window local covariance and effective rank over hidden-state
//! trajectories, plus a threshold rule for flagging collapse onsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{self, Matrix, JACOBI_TOL};

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_STRIDE: usize = 8;

/// Ordered hidden states `h_1 … h_T` of one generation, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    dim: usize,
    states: Vec<f64>,
    token_texts: Option<Vec<String>>,
    correctness_label: Option<bool>,
    layer_tag: u32,
}

impl StateTrajectory {
    pub fn new(dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("trajectory dimension must be positive"));
        }
        if states.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values do not form rows of dimension {dim}",
                states.len()
            )));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("trajectory has non-finite states"));
        }
        Ok(Self {
            dim,
            states,
            token_texts: None,
            correctness_label: None,
            layer_tag: 0,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::invalid("trajectory needs at least one state"))?;
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::invalid("states have unequal lengths"));
            }
            flat.extend_from_slice(r);
        }
        Self::new(dim, flat)
    }

    pub fn with_tokens(mut self, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} token texts for {} states",
                tokens.len(),
                self.len()
            )));
        }
        self.token_texts = Some(tokens);
        Ok(self)
    }

    pub fn with_correctness(mut self, correct: Option<bool>) -> Self {
        self.correctness_label = correct;
        self
    }

    pub fn with_layer_tag(mut self, tag: u32) -> Self {
        self.layer_tag = tag;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Generated tokens represented by this trajectory (one per state).
    pub fn token_count(&self) -> usize {
        self.len()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn token_texts(&self) -> Option<&[String]> {
        self.token_texts.as_deref()
    }

    pub fn correctness_label(&self) -> Option<bool> {
        self.correctness_label
    }

    pub fn layer_tag(&self) -> u32 {
        self.layer_tag
    }

    /// States `start..end` as a `(end − start) × d` matrix.
    pub fn window_matrix(&self, start: usize, end: usize) -> Matrix {
        let data = self.states[start * self.dim..end * self.dim].to_vec();
        Matrix::new(end - start, self.dim, data).expect("trajectory states are finite")
    }
}

/// Corpus filter selecting long, incorrect chains: traces labelled wrong and
/// running past `min_tokens`. Unlabelled traces are rejected while
/// `require_incorrect` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseFilter {
    pub min_tokens: usize,
    pub require_incorrect: bool,
}

impl Default for CollapseFilter {
    fn default() -> Self {
        Self {
            min_tokens: 4000,
            require_incorrect: true,
        }
    }
}

impl CollapseFilter {
    pub fn accepts(&self, traj: &StateTrajectory) -> bool {
        let label_ok = !self.require_incorrect || traj.correctness_label() == Some(false);
        label_ok && traj.token_count() > self.min_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    /// Index of the last state inside the window.
    pub step: usize,
    pub effrank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub window: usize,
    pub stride: usize,
    pub dim: usize,
    pub effrank_series: Vec<SeriesPoint>,
    pub detection_step: Option<usize>,
    pub baseline: Option<f64>,
    pub theta: Option<f64>,
    pub sustain: Option<usize>,
}

impl CollapseReport {
    pub fn values(&self) -> Vec<f64> {
        self.effrank_series.iter().map(|p| p.effrank).collect()
    }

    /// Runs [`detect_collapse`] and records the rule and its outcome.
    pub fn apply_detection(&mut self, theta: f64, sustain: usize) -> Result<Option<usize>> {
        let (baseline, step) = detect_with_baseline(self, theta, sustain)?;
        self.baseline = Some(baseline);
        self.theta = Some(theta);
        self.sustain = Some(sustain);
        self.detection_step = step;
        Ok(step)
    }
}

/// How a window's covariance spectrum is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectrumRoute {
    /// Gram route when `d > k`, dense otherwise.
    #[default]
    Auto,
    /// Eigenvalues of the `k × k` Gram matrix of centred states.
    Gram,
    /// Eigenvalues of the `d × d` covariance.
    Dense,
}

/// Unbiased local covariance `Σ = (1/(k−1)) Σ_i (h_i − μ)ᵀ(h_i − μ)`.
pub fn local_covariance<R: AsRef<[f64]>>(window: &[R], d: usize) -> Result<Matrix> {
    let k = window.len();
    if k < 2 {
        return Err(Error::WindowTooSmall(k));
    }
    let centered = center_rows(window, d)?;
    let mut cov = Matrix::zeros(d, d);
    for row in &centered {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                cov.set(i, j, cov.get(i, j) + ri * row[j]);
            }
        }
    }
    let norm = 1.0 / (k as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) * norm;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

fn center_rows<R: AsRef<[f64]>>(window: &[R], d: usize) -> Result<Vec<Vec<f64>>> {
    let k = window.len() as f64;
    let mut mean = vec![0.0; d];
    for row in window {
        let row = row.as_ref();
        if row.len() != d {
            return Err(Error::invalid(format!(
                "state of length {} in a window of dimension {d}",
                row.len()
            )));
        }
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(window
        .iter()
        .map(|row| row.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect())
}

/// Covariance eigenvalues (descending, `1/(k−1)` scale) of a window of states.
///
/// The Gram route returns the `k` eigenvalues of `H_c H_cᵀ/(k−1)`, which
/// share the non-zero part of the `d × d` spectrum.
pub fn window_spectrum<R: AsRef<[f64]>>(
    window: &[R],
    d: usize,
    route: SpectrumRoute,
) -> Result<Vec<f64>> {
    let k = window.len();
    if k < 2 {
        return Err(Error::WindowTooSmall(k));
    }
    let use_gram = match route {
        SpectrumRoute::Auto => d > k,
        SpectrumRoute::Gram => true,
        SpectrumRoute::Dense => false,
    };
    let m = if use_gram {
        let centered = center_rows(window, d)?;
        // Columns of the d × k matrix are the centred states.
        let hc = Matrix::from_columns(&centered)?;
        let mut g = linalg::gram(&hc)?;
        g.scale(1.0 / (k as f64 - 1.0));
        g
    } else {
        local_covariance(window, d)?
    };
    Ok(linalg::sym_eig(&m, JACOBI_TOL)?.eigenvalues)
}

/// `exp(−Σ p_j ln p_j)` with `p_j = λ_j / Σλ`, taking `0 · ln 0 = 0`.
///
/// The result is clamped into `[1, #{λ > 0}]` to absorb the last ulp of
/// round-off.
pub fn effective_rank(spectrum: &[f64]) -> Result<f64> {
    if spectrum.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("spectrum has non-finite values"));
    }
    if spectrum.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("spectrum has negative values"));
    }
    let total: f64 = spectrum.iter().sum();
    let positive = spectrum.iter().filter(|&&x| x > 0.0).count();
    if positive == 0 || total <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let entropy: f64 = spectrum
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp().clamp(1.0, positive as f64))
}

/// Effective rank with the collapsed-point convention: an all-zero spectrum
/// counts as 1.
pub fn effective_rank_or_collapsed(spectrum: &[f64]) -> Result<f64> {
    match effective_rank(spectrum) {
        Err(Error::DegenerateSpectrum) => Ok(1.0),
        other => other,
    }
}

/// Spread below this fraction of the states' RMS norm is round-off, and the
/// window counts as a collapsed point.
pub const COLLAPSE_REL: f64 = 1e-12;

/// EffRank of one window, treating a window whose RMS spread is at most
/// [`COLLAPSE_REL`] of its RMS norm as collapsed (1.0).
pub fn window_effrank<R: AsRef<[f64]>>(window: &[R], d: usize, route: SpectrumRoute) -> Result<f64> {
    let spectrum = window_spectrum(window, d, route)?;
    let spread: f64 = spectrum.iter().sum();
    let energy = window
        .iter()
        .map(|r| r.as_ref().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / window.len() as f64;
    if spread <= COLLAPSE_REL * COLLAPSE_REL * energy {
        return Ok(1.0);
    }
    effective_rank_or_collapsed(&spectrum)
}

/// EffRank over windows ending at `t = k, k + stride, …` with default
/// routing and execution.
pub fn effrank_series(traj: &StateTrajectory, k: usize, stride: usize) -> Result<CollapseReport> {
    effrank_series_with(traj, k, stride, SpectrumRoute::Auto, Execution::default())
}

pub fn effrank_series_with(
    traj: &StateTrajectory,
    k: usize,
    stride: usize,
    route: SpectrumRoute,
    exec: Execution,
) -> Result<CollapseReport> {
    if k < 2 {
        return Err(Error::WindowTooSmall(k));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let len = traj.len();
    if len < k {
        return Err(Error::TrajectoryTooShort { len, window: k });
    }
    let count = (len - k) / stride + 1;
    let d = traj.dim();
    let series = exec.try_map_range(count, |i| {
        let end = k + i * stride;
        let window: Vec<&[f64]> = (end - k..end).map(|j| traj.state(j)).collect();
        Ok::<_, Error>(SeriesPoint {
            step: end - 1,
            effrank: window_effrank(&window, d, route)?,
        })
    })?;
    Ok(CollapseReport {
        window: k,
        stride,
        dim: d,
        effrank_series: series,
        detection_step: None,
        baseline: None,
        theta: None,
        sustain: None,
    })
}

/// Earliest step where the series stays below `theta · baseline` for
/// `sustain` consecutive windows, the baseline being the mean of the first
/// `sustain` values.
pub fn detect_collapse(report: &CollapseReport, theta: f64, sustain: usize) -> Result<Option<usize>> {
    detect_with_baseline(report, theta, sustain).map(|(_, step)| step)
}

fn detect_with_baseline(
    report: &CollapseReport,
    theta: f64,
    sustain: usize,
) -> Result<(f64, Option<usize>)> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid(format!("theta must lie in (0, 1), got {theta}")));
    }
    if sustain == 0 {
        return Err(Error::invalid("sustain must be at least 1"));
    }
    let series = &report.effrank_series;
    if series.is_empty() || series.len() < sustain {
        return Err(Error::InsufficientSeries {
            len: series.len(),
            sustain,
        });
    }
    let baseline = series[..sustain].iter().map(|p| p.effrank).sum::<f64>() / sustain as f64;
    let cut = theta * baseline;
    let step = series
        .windows(sustain)
        .position(|w| w.iter().all(|p| p.effrank < cut))
        .map(|i| series[i].step);
    Ok((baseline, step))
}
