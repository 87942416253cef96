//! Local bias-manifold estimation from Monte-Carlo look-ahead samples.
//!
//! The `d × d` sample covariance is never formed. Samples are centred into a
//! `d × N` matrix `H`, the `N × N` Gram matrix `HᵀH` is diagonalised, and its
//! eigenvectors are lifted back to `R^d` (Micro-SVD).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, JACOBI_TOL};

pub const DEFAULT_SAMPLES: usize = 8;
pub const DEFAULT_RHO: f64 = 0.90;
pub const DEFAULT_K_MAX: usize = 4;
pub const DEFAULT_LOOKAHEAD_TOKENS: usize = 8;

/// How the per-token states of one look-ahead trajectory are reduced to a
/// single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    MeanPool,
    LastState,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-pool" | "mean" => Ok(Aggregation::MeanPool),
            "last-state" | "last" => Ok(Aggregation::LastState),
            other => Err(Error::invalid(format!("unknown aggregation mode {other:?}"))),
        }
    }
}

pub fn aggregate_trajectory<R: AsRef<[f64]>>(states: &[R], mode: Aggregation) -> Result<Vec<f64>> {
    let first = states
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty trajectory"))?
        .as_ref();
    let d = first.len();
    if states.iter().any(|s| s.as_ref().len() != d) {
        return Err(Error::invalid("states have unequal lengths"));
    }
    match mode {
        Aggregation::LastState => Ok(states[states.len() - 1].as_ref().to_vec()),
        Aggregation::MeanPool => {
            let mut acc = vec![0.0; d];
            for s in states {
                acc.iter_mut().zip(s.as_ref()).for_each(|(a, x)| *a += x);
            }
            let n = states.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok(acc)
        }
    }
}

/// Aggregated look-ahead samples `h_1 … h_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCSampleSet {
    pub dim: usize,
    pub samples: Vec<Vec<f64>>,
    pub aggregation: Aggregation,
    pub source_temperature: f64,
}

impl MCSampleSet {
    pub fn new(samples: Vec<Vec<f64>>, aggregation: Aggregation, source_temperature: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid(format!(
                "manifold estimation needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let dim = samples[0].len();
        if dim == 0 {
            return Err(Error::invalid("samples must have positive dimension"));
        }
        for s in &samples {
            if s.len() != dim {
                return Err(Error::invalid("samples have unequal lengths"));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("samples have non-finite entries"));
            }
        }
        Ok(Self {
            dim,
            samples,
            aggregation,
            source_temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Mean, orthonormal basis and covariance eigenvalues of the dominant local
/// subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasManifold {
    pub mean: Vec<f64>,
    /// `d × k`, orthonormal columns.
    pub basis: Matrix,
    /// Covariance-scale eigenvalues `λ_j / (N − 1)`, descending.
    pub eigenvalues: Vec<f64>,
    pub sample_count: usize,
    /// Fraction of total variance captured by the retained components.
    pub energy_fraction: f64,
}

impl BiasManifold {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector of length {} against a manifold of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn centered(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(x.iter().zip(&self.mean).map(|(a, m)| a - m).collect())
    }
}

/// Sample mean of the rows.
pub fn sample_mean(samples: &[Vec<f64>]) -> Vec<f64> {
    let d = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
    }
    let n = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Estimates the bias manifold, keeping the smallest `k` whose cumulative
/// energy reaches `rho` of the total, capped at `k_max`.
pub fn estimate_manifold(set: &MCSampleSet, rho: f64, k_max: usize) -> Result<BiasManifold> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 1], got {rho}")));
    }
    if k_max == 0 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    if set.samples.len() < 2 {
        return Err(Error::invalid("manifold estimation needs at least 2 samples"));
    }
    let n = set.samples.len();
    let mean = sample_mean(&set.samples);
    let centered: Vec<Vec<f64>> = set
        .samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    if centered.iter().flatten().all(|&x| x == 0.0) {
        return Err(Error::DegenerateSamples);
    }
    let h = Matrix::from_columns(&centered)?;
    let g = linalg::gram(&h)?;
    let geig = linalg::sym_eig(&g, JACOBI_TOL)?;
    let (u, lambdas) = match linalg::recover_components(&h, &geig, linalg::default_min_lambda(&geig)) {
        Err(Error::DegenerateSpectrum) => return Err(Error::DegenerateSamples),
        other => other?,
    };

    let total: f64 = geig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let target = rho * total * (1.0 - 1e-12);
    let mut k = 0;
    let mut cum = 0.0;
    while k < lambdas.len() && k < k_max {
        cum += lambdas[k];
        k += 1;
        if cum >= target {
            break;
        }
    }

    let d = h.rows();
    let mut basis = Matrix::zeros(d, k);
    for c in 0..k {
        for r in 0..d {
            basis.set(r, c, u.get(r, c));
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    Ok(BiasManifold {
        mean,
        basis,
        eigenvalues: lambdas[..k].iter().map(|l| l * scale).collect(),
        sample_count: n,
        energy_fraction: cum / total,
    })
}

/// Squared norms of the in-manifold and residual parts of `x − μ̂`.
pub fn manifold_energy(manifold: &BiasManifold, x: &[f64]) -> Result<(f64, f64)> {
    let c = manifold.centered(x)?;
    let (par, perp) = linalg::project_split(&manifold.basis, &c)?;
    Ok((linalg::dot(&par, &par), linalg::dot(&perp, &perp)))
}
