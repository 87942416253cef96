//! Orthogonal probe selection.
//!
//! Each candidate latent `z_j` is centred on the manifold mean and split
//! against the manifold basis. The score is the residual norm over the
//! centred norm, `‖(I − UUᵀ)(z_j − μ̂)‖ / (‖z_j − μ̂‖ + ε)`, and the selected
//! probe is the strict argmax with ties going to the lowest index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg;
use crate::manifold::BiasManifold;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_PROBE_LEN: usize = 8;
pub const DEFAULT_CANDIDATES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCandidate {
    pub tokens: Vec<String>,
    pub latent: Vec<f64>,
    pub residual_norm: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selector {
    Orthogonal,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSelection {
    pub chosen_index: usize,
    pub candidates: Vec<ProbeCandidate>,
    pub epsilon: f64,
    pub selector: Selector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifold_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl ProbeSelection {
    pub fn chosen(&self) -> &ProbeCandidate {
        &self.candidates[self.chosen_index]
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.candidates.iter().map(|c| c.score)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    // Zero is accepted so scale invariance can be checked exactly.
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    Ok(())
}

/// Residual vector and `(‖r‖, score)` for one latent.
pub fn residual_and_score(
    z: &[f64],
    manifold: &BiasManifold,
    epsilon: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    check_epsilon(epsilon)?;
    let centered = manifold.centered(z)?;
    let (_, residual) = linalg::project_split(&manifold.basis, &centered)?;
    let r = linalg::norm(&residual);
    let denom = linalg::norm(&centered) + epsilon;
    let score = if denom > 0.0 { (r / denom).min(1.0) } else { 0.0 };
    Ok((residual, r, score))
}

pub fn orthogonality_score(z: &[f64], manifold: &BiasManifold, epsilon: f64) -> Result<f64> {
    residual_and_score(z, manifold, epsilon).map(|(_, _, s)| s)
}

fn score_all(
    candidates: Vec<(Vec<String>, Vec<f64>)>,
    manifold: &BiasManifold,
    epsilon: f64,
    exec: Execution,
) -> Result<Vec<ProbeCandidate>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    check_epsilon(epsilon)?;
    let scored = exec.try_map_range(candidates.len(), |i| {
        let (_, r, s) = residual_and_score(&candidates[i].1, manifold, epsilon)?;
        Ok::<_, Error>((r, s))
    })?;
    Ok(candidates
        .into_iter()
        .zip(scored)
        .map(|((tokens, latent), (residual_norm, score))| ProbeCandidate {
            tokens,
            latent,
            residual_norm,
            score,
        })
        .collect())
}

/// Index of the first maximum.
pub fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn select_probe(
    candidates: Vec<(Vec<String>, Vec<f64>)>,
    manifold: &BiasManifold,
    epsilon: f64,
) -> Result<ProbeSelection> {
    select_probe_with(candidates, manifold, epsilon, Execution::default())
}

pub fn select_probe_with(
    candidates: Vec<(Vec<String>, Vec<f64>)>,
    manifold: &BiasManifold,
    epsilon: f64,
    exec: Execution,
) -> Result<ProbeSelection> {
    let candidates = score_all(candidates, manifold, epsilon, exec)?;
    let chosen_index = argmax_first(candidates.iter().map(|c| c.score)).ok_or(Error::NoCandidates)?;
    Ok(ProbeSelection {
        chosen_index,
        candidates,
        epsilon,
        selector: Selector::Orthogonal,
        manifold_ref: None,
        tag: None,
    })
}

/// Uniform index draw used by the random-selection ablation: the first
/// `random_range(0..m)` of a ChaCha8 stream seeded with `seed`.
pub fn random_index(m: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..m)
}

/// Picks a candidate uniformly at random. Scores are still computed so the
/// report is comparable with [`select_probe`].
pub fn random_select(
    candidates: Vec<(Vec<String>, Vec<f64>)>,
    manifold: &BiasManifold,
    epsilon: f64,
    seed: u64,
) -> Result<ProbeSelection> {
    let candidates = score_all(candidates, manifold, epsilon, Execution::default())?;
    Ok(ProbeSelection {
        chosen_index: random_index(candidates.len(), seed),
        candidates,
        epsilon,
        selector: Selector::Random { seed },
        manifold_ref: None,
        tag: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn e1_manifold(d: usize) -> BiasManifold {
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        BiasManifold {
            mean: vec![0.0; d],
            basis: Matrix::from_columns(&[e1]).unwrap(),
            eigenvalues: vec![1.0],
            sample_count: 2,
            energy_fraction: 1.0,
        }
    }

    fn cand(z: &[f64]) -> (Vec<String>, Vec<f64>) {
        (vec!["tok".to_string()], z.to_vec())
    }

    #[test]
    fn score_examples() {
        let m = e1_manifold(3);
        assert!(orthogonality_score(&[1.0, 0.0, 0.0], &m, 1e-8).unwrap() <= 1e-7);
        assert!(orthogonality_score(&[0.0, 1.0, 0.0], &m, 1e-8).unwrap() >= 1.0 - 1e-7);
        let s = orthogonality_score(&[1.0, 1.0, 0.0], &m, 1e-8).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(orthogonality_score(&[1.0, 1.0], &m, 1e-8).is_err());
        assert!(orthogonality_score(&[1.0, 1.0, 0.0], &m, -1.0).is_err());
        assert_eq!(orthogonality_score(&[0.0; 3], &m, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn selection_examples() {
        let m = e1_manifold(3);
        let one = select_probe(vec![cand(&[1.0, 0.0, 0.0])], &m, 1e-8).unwrap();
        assert_eq!(one.chosen_index, 0);
        let two = select_probe(vec![cand(&[1.0, 0.0, 0.0]), cand(&[0.0, 0.0, 1.0])], &m, 1e-8).unwrap();
        assert_eq!(two.chosen_index, 1);
        assert!(matches!(select_probe(vec![], &m, 1e-8), Err(Error::NoCandidates)));
        assert!(matches!(random_select(vec![], &m, 1e-8, 1), Err(Error::NoCandidates)));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = e1_manifold(3);
        let sel = select_probe(
            vec![cand(&[1.0, 0.0, 0.0]), cand(&[0.0, 2.0, 0.0]), cand(&[0.0, 0.0, 2.0])],
            &m,
            1e-8,
        )
        .unwrap();
        assert_eq!(sel.candidates[1].score, sel.candidates[2].score);
        assert_eq!(sel.chosen_index, 1);
        assert_eq!(argmax_first([1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_first(std::iter::empty()), None);
    }

    #[test]
    fn random_selection_is_deterministic() {
        let m = e1_manifold(3);
        let c = || (0..8).map(|i| cand(&[i as f64, 1.0, 0.0])).collect::<Vec<_>>();
        let a = random_select(c(), &m, 1e-8, 42).unwrap();
        let b = random_select(c(), &m, 1e-8, 42).unwrap();
        assert_eq!(a.chosen_index, b.chosen_index);
        assert_eq!(a.selector, Selector::Random { seed: 42 });
        assert_eq!(random_select(vec![cand(&[1.0, 0.0, 0.0])], &m, 1e-8, 7).unwrap().chosen_index, 0);
    }
}
