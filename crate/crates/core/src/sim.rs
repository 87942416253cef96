//! Synthetic attention dynamics for studying rank collapse and orthogonal
//! injection at desk scale.
//!
//! `N` state rows start inside a subspace `S` and evolve by
//! `H_{t+1} = A_t (H_t W_Vᵀ) + noise`, where `A_t` is the row softmax of
//! `β_t · Ĥ_t Ĥ_tᵀ` over row-normalised states (or a fixed random convex
//! weighting in linear mode). With `W_V = I` this is `H_{t+1} = A_t H_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{self, Matrix};
use crate::manifold::{self, Aggregation, MCSampleSet};
use crate::probe::{self, ProbeSelection};
use crate::spectral::{self, SpectrumRoute, StateTrajectory};

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Softmax,
    /// Fixed convex weights drawn once per run, independent of the states.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dim: usize,
    pub slots: usize,
    /// `d × m` orthonormal basis of the initial subspace.
    pub subspace: Matrix,
    /// `d × d` value map.
    pub value_map: Matrix,
    /// Logit scale per step; at least `steps` entries.
    pub betas: Vec<f64>,
    pub steps: usize,
    pub noise_sigma: f64,
    /// Restrict noise to the initial subspace.
    pub noise_in_subspace: bool,
    pub attention: AttentionKind,
    pub seed: u64,
}

/// `β_t = from + (to − from) · t / (steps − 1)` for `t = 0 … steps − 1`.
pub fn beta_ramp(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..steps)
            .map(|t| from + (to - from) * t as f64 / (steps - 1) as f64)
            .collect(),
    }
}

pub(crate) fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormal `d × m` basis drawn from Gaussian vectors.
pub fn random_subspace(d: usize, m: usize, seed: u64) -> Result<Matrix> {
    if m == 0 || m > d {
        return Err(Error::invalid(format!("subspace dimension {m} must be in 1..={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(m);
    while vectors.len() < m {
        vectors.push(gaussian_vec(&mut rng, d));
        let b = linalg::orthonormal_basis(&vectors, 1e-8)?;
        if b.cols() < vectors.len() {
            vectors.pop();
        }
    }
    linalg::orthonormal_basis(&vectors, 1e-8)
}

impl SimConfig {
    /// A softmax run with a random `m`-dimensional subspace, identity value
    /// map, zero noise and all-zero logit scales.
    pub fn new(dim: usize, slots: usize, subspace_dim: usize, steps: usize, seed: u64) -> Result<Self> {
        let subspace = random_subspace(dim, subspace_dim, seed ^ 0x5EED_0F_5B5B)?;
        Ok(Self {
            dim,
            slots,
            subspace,
            value_map: Matrix::identity(dim),
            betas: vec![0.0; steps],
            steps,
            noise_sigma: 0.0,
            noise_in_subspace: false,
            attention: AttentionKind::Softmax,
            seed,
        })
    }

    pub fn with_betas(mut self, betas: Vec<f64>) -> Self {
        self.betas = betas;
        self
    }

    pub fn with_noise(mut self, sigma: f64, in_subspace: bool) -> Self {
        self.noise_sigma = sigma;
        self.noise_in_subspace = in_subspace;
        self
    }

    pub fn with_value_map(mut self, value_map: Matrix) -> Self {
        self.value_map = value_map;
        self
    }

    pub fn with_attention(mut self, attention: AttentionKind) -> Self {
        self.attention = attention;
        self
    }

    pub fn with_subspace(mut self, subspace: Matrix) -> Self {
        self.subspace = subspace;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.slots == 0 {
            return Err(Error::invalid("dim and slots must be positive"));
        }
        if self.subspace.rows() != self.dim || self.subspace.cols() == 0 || self.subspace.cols() > self.dim {
            return Err(Error::invalid(format!(
                "subspace basis must be {}×m with 1 ≤ m ≤ {}",
                self.dim, self.dim
            )));
        }
        if self.subspace.orthonormality_error() > 1e-8 {
            return Err(Error::invalid("subspace basis is not orthonormal"));
        }
        if self.value_map.shape() != (self.dim, self.dim) {
            return Err(Error::invalid("value map must be d×d"));
        }
        if self.betas.len() < self.steps {
            return Err(Error::invalid(format!(
                "{} logit scales for {} steps",
                self.betas.len(),
                self.steps
            )));
        }
        if self.betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid("logit scales must be finite and non-negative"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Every step of one simulation.
#[derive(Debug, Clone)]
pub struct SimRun {
    /// `H_0 … H_T`, each `N × d`.
    pub states: Vec<Matrix>,
    /// `A_0 … A_{T−1}`, each `N × N`.
    pub attention: Vec<Matrix>,
}

impl SimRun {
    /// All step states concatenated row-wise, `H_0` first.
    pub fn trajectory(&self) -> StateTrajectory {
        let d = self.states[0].cols();
        let flat: Vec<f64> = self.states.iter().flat_map(|h| h.as_slice().iter().copied()).collect();
        StateTrajectory::new(d, flat).expect("simulated states are finite")
    }

    /// Numerical rank of each `H_t`.
    pub fn state_ranks(&self, rel_tol: f64) -> Result<Vec<usize>> {
        self.states
            .iter()
            .map(|h| Ok(linalg::numerical_rank(&linalg::singular_values(h)?, rel_tol)))
            .collect()
    }

    pub fn attention_ranks(&self, rel_tol: f64) -> Result<Vec<usize>> {
        self.attention
            .iter()
            .map(|a| Ok(linalg::numerical_rank(&linalg::singular_values(a)?, rel_tol)))
            .collect()
    }

    /// EffRank of the covariance of each step's `N` rows.
    pub fn effrank_per_step(&self) -> Result<Vec<f64>> {
        let n = self.states[0].rows();
        let rep = spectral::effrank_series_with(
            &self.trajectory(),
            n,
            n,
            SpectrumRoute::Auto,
            Execution::Sequential,
        )?;
        Ok(rep.values())
    }
}

fn row_normalized(h: &Matrix) -> Matrix {
    let mut out = h.clone();
    for r in 0..h.rows() {
        let n = linalg::norm(h.row(r));
        if n > 0.0 {
            for c in 0..h.cols() {
                out.set(r, c, h.get(r, c) / n);
            }
        }
    }
    out
}

/// Row softmax of `β · Ĥ Ĥᵀ`.
pub fn softmax_attention(h: &Matrix, beta: f64) -> Matrix {
    let hn = row_normalized(h);
    let n = h.rows();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| beta * linalg::dot(hn.row(i), hn.row(j))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            a.set(i, j, e / z);
        }
    }
    a
}

fn random_convex_weights(n: usize, rng: &mut impl Rng) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        for (j, x) in w.into_iter().enumerate() {
            a.set(i, j, x / z);
        }
    }
    a
}

fn initial_states(config: &SimConfig, rng: &mut impl Rng) -> Result<Matrix> {
    let m = config.subspace_dim();
    let rows: Vec<Vec<f64>> = (0..config.slots)
        .map(|_| config.subspace.mat_vec(&gaussian_vec(rng, m)))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

fn noise(config: &SimConfig, rng: &mut impl Rng) -> Result<Matrix> {
    let (n, d, m) = (config.slots, config.dim, config.subspace_dim());
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        let v = if config.noise_in_subspace {
            config.subspace.mat_vec(&gaussian_vec(rng, m))?
        } else {
            gaussian_vec(rng, d)
        };
        for (c, x) in v.into_iter().enumerate() {
            out.set(r, c, config.noise_sigma * x);
        }
    }
    Ok(out)
}

/// Runs the dynamics, keeping every step.
pub fn simulate_run(config: &SimConfig) -> Result<SimRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut h = initial_states(config, &mut rng)?;
    let fixed = match config.attention {
        AttentionKind::Linear => Some(random_convex_weights(config.slots, &mut rng)),
        AttentionKind::Softmax => None,
    };
    let wv_t = config.value_map.transpose();
    let mut states = vec![h.clone()];
    let mut attention = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let a = match &fixed {
            Some(a) => a.clone(),
            None => softmax_attention(&h, config.betas[t]),
        };
        let values = h.matmul(&wv_t)?;
        let mut next = a.matmul(&values)?;
        if config.noise_sigma > 0.0 {
            let e = noise(config, &mut rng)?;
            next = Matrix::new(
                next.rows(),
                next.cols(),
                next.as_slice().iter().zip(e.as_slice()).map(|(x, y)| x + y).collect(),
            )?;
        }
        attention.push(a);
        states.push(next.clone());
        h = next;
    }
    Ok(SimRun { states, attention })
}

/// Runs the dynamics and returns the concatenated step states.
pub fn simulate(config: &SimConfig) -> Result<StateTrajectory> {
    Ok(simulate_run(config)?.trajectory())
}

/// Largest relative residual `‖(I − P_t) h‖ / ‖h‖` of any state row of
/// `H_t` against `span(W_Vᵗ S)` over a noiseless run.
pub fn check_subspace_invariance(config: &SimConfig) -> Result<f64> {
    if config.noise_sigma != 0.0 {
        return Err(Error::invalid("subspace invariance needs a noiseless run"));
    }
    let run = simulate_run(config)?;
    let mut basis = config.subspace.clone();
    let mut worst = 0.0f64;
    for (t, h) in run.states.iter().enumerate() {
        if t > 0 {
            let mapped = config.value_map.matmul(&basis)?;
            let cols: Vec<Vec<f64>> = (0..mapped.cols()).map(|c| mapped.column(c)).collect();
            basis = linalg::orthonormal_basis(&cols, 1e-12)?;
        }
        for r in 0..h.rows() {
            let row = h.row(r);
            let n = linalg::norm(row);
            if n == 0.0 {
                continue;
            }
            let (_, perp) = linalg::project_split(&basis, row)?;
            worst = worst.max(linalg::norm(&perp) / n);
        }
    }
    Ok(worst)
}

/// Applies `f` to every entry independently.
pub fn apply_coordinatewise(h: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::new(h.rows(), h.cols(), h.as_slice().iter().map(|&x| f(x)).collect())
        .expect("coordinate-wise map must stay finite")
}

/// Columns whose entries are all equal (zero variance across rows).
pub fn constant_coordinates(h: &Matrix) -> Vec<usize> {
    (0..h.cols())
        .filter(|&c| (1..h.rows()).all(|r| h.get(r, c) == h.get(0, c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionEvent {
    /// Row index the injected vector occupies.
    pub step: usize,
    pub v: Vec<f64>,
    /// Component of `v − μ` inside the pre-injection centred span.
    pub v_par: Vec<f64>,
    pub v_perp: Vec<f64>,
    pub rank_before: usize,
    pub rank_after: usize,
    /// Smallest retained covariance eigenvalue after injection.
    pub lambda_new: f64,
}

fn centered_rows(states: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = states.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut().zip(states.row(r)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = states.clone();
    for r in 0..n {
        for j in 0..d {
            c.set(r, j, states.get(r, j) - mean[j]);
        }
    }
    (mean, c)
}

/// Appends `v` to the state rows and reports the numerical rank of the
/// centred spectrum before and after.
pub fn inject_orthogonal(states: &Matrix, v: &[f64], rel_tol: f64) -> Result<InjectionEvent> {
    let (n, d) = states.shape();
    if n == 0 {
        return Err(Error::invalid("no states to inject into"));
    }
    if v.len() != d || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("injected vector must be finite with the state dimension"));
    }
    let (mean, centered) = centered_rows(states);
    let (sv_before, basis) = linalg::row_space(&centered, rel_tol)?;
    let rank_before = linalg::numerical_rank(&sv_before, rel_tol);
    let offset: Vec<f64> = v.iter().zip(&mean).map(|(a, m)| a - m).collect();
    let (v_par, v_perp) = linalg::project_split(&basis, &offset)?;

    let mut rows: Vec<Vec<f64>> = (0..n).map(|r| states.row(r).to_vec()).collect();
    rows.push(v.to_vec());
    let (_, centered_after) = centered_rows(&Matrix::from_rows(&rows)?);
    let sv_after = linalg::singular_values(&centered_after)?;
    let rank_after = linalg::numerical_rank(&sv_after, rel_tol);
    let lambda_new = if rank_after == 0 {
        0.0
    } else {
        sv_after[rank_after - 1].powi(2) / n as f64
    };
    Ok(InjectionEvent {
        step: n,
        v: v.to_vec(),
        v_par,
        v_perp,
        rank_before,
        rank_after,
        lambda_new,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanShift {
    pub delta_exact: Vec<f64>,
    pub delta_approx: Vec<f64>,
    pub rel_gap: f64,
}

/// Shift of the context mean when `l_inj` copies of `h_s` join `l_ctx`
/// states with mean `mu`, exactly and by the `l_inj / l_ctx` approximation.
pub fn mean_shift(l_ctx: usize, mu: &[f64], l_inj: usize, h_s: &[f64]) -> Result<MeanShift> {
    if l_ctx == 0 || l_inj == 0 {
        return Err(Error::invalid("context and injection lengths must be positive"));
    }
    if mu.len() != h_s.len() {
        return Err(Error::invalid("mean and injected state differ in dimension"));
    }
    let exact_w = l_inj as f64 / (l_ctx + l_inj) as f64;
    let approx_w = l_inj as f64 / l_ctx as f64;
    let diff: Vec<f64> = h_s.iter().zip(mu).map(|(a, b)| a - b).collect();
    let delta_exact: Vec<f64> = diff.iter().map(|x| exact_w * x).collect();
    let delta_approx: Vec<f64> = diff.iter().map(|x| approx_w * x).collect();
    let gap: Vec<f64> = delta_exact.iter().zip(&delta_approx).map(|(a, b)| a - b).collect();
    let ne = linalg::norm(&delta_exact);
    let rel_gap = if ne > 0.0 { linalg::norm(&gap) / ne } else { 0.0 };
    Ok(MeanShift {
        delta_exact,
        delta_approx,
        rel_gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSelector {
    Orthogonal,
    Random,
    /// No injection at all.
    None,
}

/// How candidate latents are synthesised around the collapsed window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMix {
    /// Each candidate has an in-manifold part plus an out-of-span part with
    /// a uniform random weight in `[0, 1)`.
    Mixture,
    /// Every candidate lies in the manifold.
    AllInSpan,
    /// One candidate is purely out-of-span, the rest lie in the manifold.
    OneOrthogonal,
}

#[derive(Debug, Clone)]
pub struct EjectionConfig {
    pub sim: SimConfig,
    pub window: usize,
    pub candidates: usize,
    pub rho: f64,
    pub k_max: usize,
    pub epsilon: f64,
    pub rank_tol: f64,
    pub mix: CandidateMix,
}

impl EjectionConfig {
    /// d = 32, N = 16, a 3-dimensional subspace, 32 steps with β ramping
    /// 0 → 20 and subspace-confined noise, 64-state window, 8 candidates.
    pub fn standard() -> Result<Self> {
        let sim = SimConfig::new(32, 16, 3, 32, 0)?
            .with_betas(beta_ramp(0.0, 20.0, 32))
            .with_noise(0.05, true);
        Ok(Self {
            sim,
            window: 64,
            candidates: 8,
            rho: manifold::DEFAULT_RHO,
            k_max: manifold::DEFAULT_K_MAX,
            epsilon: probe::DEFAULT_EPSILON,
            rank_tol: DEFAULT_RANK_TOL,
            mix: CandidateMix::Mixture,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub chosen_index: Option<usize>,
    pub perp_energy: f64,
    pub effrank_before: f64,
    pub effrank_after: f64,
    pub rank_before: usize,
    pub rank_after: usize,
}

impl TrialOutcome {
    pub fn effrank_jump(&self) -> f64 {
        self.effrank_after - self.effrank_before
    }

    pub fn rank_jump(&self) -> i64 {
        self.rank_after as i64 - self.rank_before as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stddev: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, stddev: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EjectionSummary {
    pub selector: InjectionSelector,
    pub trials: usize,
    pub perp_energy: MeanStd,
    pub effrank_jump: MeanStd,
    pub rank_jump: MeanStd,
    pub outcomes: Vec<TrialOutcome>,
    #[serde(skip)]
    pub selections: Vec<ProbeSelection>,
}

/// Per-trial seeds drawn up front so results do not depend on scheduling.
pub fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| rng.random()).collect()
}

fn synthesize_candidates(
    config: &EjectionConfig,
    manifold: &manifold::BiasManifold,
    window_basis: &Matrix,
    total_variance: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let d = manifold.dim();
    let m = config.candidates;
    let scale = (config.window as f64 * total_variance).sqrt();
    let special = rng.random_range(0..m);
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        // Typical in-manifold deviation: basis times √λ-scaled Gaussians.
        let coeffs: Vec<f64> = manifold
            .eigenvalues
            .iter()
            .map(|l| l.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let in_span = manifold.basis.mat_vec(&coeffs)?;
        let raw = gaussian_vec(rng, d);
        let (_, out_dir) = linalg::project_split(window_basis, &raw)?;
        let nd = linalg::norm(&out_dir);
        let out_dir: Vec<f64> = out_dir.iter().map(|x| x / nd).collect();
        let weight: f64 = rng.random_range(0.0..1.0);
        let (w_in, w_out) = match config.mix {
            CandidateMix::Mixture => (1.0, weight),
            CandidateMix::AllInSpan => (1.0, 0.0),
            CandidateMix::OneOrthogonal if j == special => (0.0, 1.0),
            CandidateMix::OneOrthogonal => (1.0, 0.0),
        };
        let z: Vec<f64> = (0..d)
            .map(|i| manifold.mean[i] + w_in * in_span[i] + w_out * scale * out_dir[i])
            .collect();
        out.push(z);
    }
    Ok(out)
}

fn run_trial(
    config: &EjectionConfig,
    selector: InjectionSelector,
    seed: u64,
) -> Result<(TrialOutcome, Option<ProbeSelection>)> {
    let run = simulate_run(&config.sim.clone().with_seed(seed))?;
    let traj = run.trajectory();
    if traj.len() < config.window {
        return Err(Error::TrajectoryTooShort {
            len: traj.len(),
            window: config.window,
        });
    }
    let start = traj.len() - config.window;
    let window = traj.window_matrix(start, traj.len());
    let rows: Vec<Vec<f64>> = (start..traj.len()).map(|i| traj.state(i).to_vec()).collect();
    let set = MCSampleSet::new(rows.clone(), Aggregation::MeanPool, 0.0)?;
    let manifold = manifold::estimate_manifold(&set, config.rho, config.k_max)?;

    let (_, centered) = centered_rows(&window);
    let (_, window_basis) = linalg::row_space(&centered, config.rank_tol)?;
    let spectrum = spectral::window_spectrum(&rows, traj.dim(), SpectrumRoute::Auto)?;
    let total_variance: f64 = spectrum.iter().sum();
    let effrank_before = spectral::window_effrank(&rows, traj.dim(), SpectrumRoute::Auto)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00_D15C_0001);
    let latents = synthesize_candidates(config, &manifold, &window_basis, total_variance, &mut rng)?;
    let candidates: Vec<(Vec<String>, Vec<f64>)> = latents
        .into_iter()
        .enumerate()
        .map(|(j, z)| (vec![format!("cand{j}")], z))
        .collect();
    let selection = match selector {
        InjectionSelector::None => None,
        InjectionSelector::Orthogonal => Some(probe::select_probe_with(
            candidates,
            &manifold,
            config.epsilon,
            Execution::Sequential,
        )?),
        InjectionSelector::Random => {
            Some(probe::random_select(candidates, &manifold, config.epsilon, rng.random())?)
        }
    };

    let outcome = match &selection {
        None => {
            let rank = linalg::numerical_rank(&linalg::singular_values(&centered)?, config.rank_tol);
            TrialOutcome {
                seed,
                chosen_index: None,
                perp_energy: 0.0,
                effrank_before,
                effrank_after: effrank_before,
                rank_before: rank,
                rank_after: rank,
            }
        }
        Some(sel) => {
            let z = &sel.chosen().latent;
            let (_, perp_energy) = manifold::manifold_energy(&manifold, z)?;
            let event = inject_orthogonal(&window, z, config.rank_tol)?;
            let mut after = rows;
            after.push(z.clone());
            TrialOutcome {
                seed,
                chosen_index: Some(sel.chosen_index),
                perp_energy,
                effrank_before,
                effrank_after: spectral::window_effrank(&after, traj.dim(), SpectrumRoute::Auto)?,
                rank_before: event.rank_before,
                rank_after: event.rank_after,
            }
        }
    };
    Ok((outcome, selection))
}

/// Collapse, estimate, synthesise candidates, inject; repeated over seeded
/// trials.
///
/// Trial `i` uses the `i`-th seed of [`trial_seeds`], so runs with different
/// selectors but the same `seed` see identical collapsed windows and
/// candidate sets.
pub fn ejection_experiment(
    config: &EjectionConfig,
    selector: InjectionSelector,
    trials: usize,
    seed: u64,
) -> Result<EjectionSummary> {
    ejection_experiment_with(config, selector, trials, seed, Execution::default())
}

pub fn ejection_experiment_with(
    config: &EjectionConfig,
    selector: InjectionSelector,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<EjectionSummary> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    if config.candidates == 0 {
        return Err(Error::NoCandidates);
    }
    let seeds = trial_seeds(seed, trials);
    let results = exec.try_map_range(trials, |i| run_trial(config, selector, seeds[i]))?;
    let (outcomes, selections): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let perp: Vec<f64> = outcomes.iter().map(|o| o.perp_energy).collect();
    let jumps: Vec<f64> = outcomes.iter().map(TrialOutcome::effrank_jump).collect();
    let ranks: Vec<f64> = outcomes.iter().map(|o| o.rank_jump() as f64).collect();
    Ok(EjectionSummary {
        selector,
        trials,
        perp_energy: MeanStd::of(&perp),
        effrank_jump: MeanStd::of(&jumps),
        rank_jump: MeanStd::of(&ranks),
        outcomes,
        selections: selections.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        let b = beta_ramp(0.0, 20.0, 5);
        assert_eq!(b, vec![0.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!(beta_ramp(1.0, 2.0, 1), vec![1.0]);
        assert!(beta_ramp(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn uniform_attention_collapses_in_one_step() {
        let cfg = SimConfig::new(8, 6, 4, 5, 3).unwrap();
        let run = simulate_run(&cfg).unwrap();
        for h in &run.states[1..] {
            for r in 1..h.rows() {
                assert_eq!(h.row(r), h.row(0));
            }
        }
        let er = run.effrank_per_step().unwrap();
        assert!(er[0] > 1.5);
        assert!(er[1..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_rows_are_convex() {
        let cfg = SimConfig::new(6, 5, 6, 3, 9).unwrap().with_betas(vec![3.0; 3]);
        let run = simulate_run(&cfg).unwrap();
        for a in &run.attention {
            for r in 0..a.rows() {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(a.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn config_validation() {
        let cfg = SimConfig::new(4, 3, 2, 5, 1).unwrap();
        assert!(cfg.clone().with_betas(vec![0.0; 2]).validate().is_err());
        assert!(cfg.clone().with_noise(-1.0, false).validate().is_err());
        assert!(cfg.clone().with_value_map(Matrix::identity(3)).validate().is_err());
        assert!(SimConfig::new(4, 3, 5, 5, 1).is_err());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let cfg = SimConfig::new(8, 6, 3, 10, 77)
            .unwrap()
            .with_betas(vec![4.0; 10])
            .with_noise(0.3, false);
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        assert_ne!(simulate(&cfg).unwrap(), simulate(&cfg.clone().with_seed(78)).unwrap());
    }

    #[test]
    fn injection_examples() {
        // Four states spanning the e1/e2 plane of R^5 (centred rank 2).
        let states = Matrix::from_rows(&[
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let e = inject_orthogonal(&states, &[0.0, 0.0, 0.0, 0.0, 1.0], 1e-9).unwrap();
        assert_eq!((e.rank_before, e.rank_after), (2, 3));
        assert!(e.lambda_new > 0.0);
        assert!((linalg::norm(&e.v_perp) - 1.0).abs() < 1e-12);
        let e = inject_orthogonal(&states, &[0.5, 0.25, 0.0, 0.0, 0.0], 1e-9).unwrap();
        assert_eq!((e.rank_before, e.rank_after), (2, 2));
        assert!(inject_orthogonal(&states, &[1.0], 1e-9).is_err());
    }

    #[test]
    fn mean_shift_constants() {
        let s = mean_shift(8192, &[0.0], 8, &[1.0]).unwrap();
        assert!((s.delta_approx[0] - 8.0 / 8192.0).abs() < 1e-15);
        assert!((s.delta_exact[0] - 8.0 / 8200.0).abs() < 1e-15);
        assert!((s.rel_gap - 8.0 / 8192.0).abs() < 1e-12);
        let z = mean_shift(10, &[1.0, 2.0], 3, &[1.0, 2.0]).unwrap();
        assert_eq!(z.delta_exact, vec![0.0, 0.0]);
        assert_eq!(z.delta_approx, vec![0.0, 0.0]);
        assert!(mean_shift(0, &[0.0], 1, &[0.0]).is_err());
    }

    #[test]
    fn coordinatewise_map_keeps_dark_coordinates() {
        let h = Matrix::from_rows(&[[1.0, 0.0, -2.0], [3.0, 0.0, 0.5], [-1.0, 0.0, 4.0]]).unwrap();
        assert_eq!(constant_coordinates(&h), vec![1]);
        let g = apply_coordinatewise(&h, |x| x.max(0.0) + 0.1 * x.tanh());
        assert_eq!(constant_coordinates(&g), vec![1]);
    }

    #[test]
    fn ejection_without_injection_is_flat() {
        let cfg = EjectionConfig::standard().unwrap();
        let s = ejection_experiment(&cfg, InjectionSelector::None, 3, 1).unwrap();
        assert_eq!(s.perp_energy.mean, 0.0);
        assert_eq!(s.effrank_jump.mean, 0.0);
        assert!(s.selections.is_empty());
        assert!(ejection_experiment(&cfg, InjectionSelector::None, 0, 1).is_err());
    }
}
