//! Independent reference implementations built on nalgebra.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use soe_core::eval::SolutionRecord;
use soe_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn gaussian_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| gaussian(rng, cols)).collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn rows_to_na(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    DMatrix::from_row_slice(rows.len(), rows[0].len(), &flat)
}

/// Random orthogonal matrix from the QR factorisation of a Gaussian one.
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Eigenvalues (descending) and eigenvectors of a symmetric matrix.
pub fn sym_eig_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(m.clone());
    let mut idx: Vec<usize> = (0..e.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), idx.len(), |r, c| e.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

/// Dense `d × d` sample covariance `(1/(N−1)) Σ (x − μ)(x − μ)ᵀ`.
pub fn dense_covariance(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let x = rows_to_na(samples);
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    (mean, c.transpose() * &c / (n - 1.0))
}

/// Sine of the largest principal angle between two column spaces with
/// orthonormal bases.
pub fn max_principal_sine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    let residual = (DMatrix::identity(d, d) - b * b.transpose()) * a;
    residual.singular_values().max()
}

/// `‖(I − UUᵀ)(z − μ)‖ / (‖z − μ‖ + ε)` through the explicit projector.
pub fn dense_score(z: &[f64], mean: &[f64], basis: &DMatrix<f64>, eps: f64) -> f64 {
    let d = z.len();
    let c = DVector::from_iterator(d, z.iter().zip(mean).map(|(a, b)| a - b));
    let p = DMatrix::identity(d, d) - basis * basis.transpose();
    let r = &p * &c;
    r.norm() / (c.norm() + eps)
}

pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Distinct correct solutions by full pairwise recomputation: sort by
/// order, build the whole cosine matrix, then accept a correct record when
/// no earlier accepted one is at least `tau` similar.
pub fn distinct_oracle(records: &[SolutionRecord], tau: f64) -> Vec<(u64, usize)> {
    let mut recs: Vec<&SolutionRecord> = records.iter().collect();
    recs.sort_by_key(|r| r.order);
    let n = recs.len();
    if n == 0 {
        return Vec::new();
    }
    let e = DMatrix::from_fn(n, recs[0].embedding.len(), |i, j| recs[i].embedding[j]);
    let sims = &e * e.transpose();
    let mut accepted = vec![false; n];
    let mut out = Vec::with_capacity(n);
    let (mut tokens, mut count) = (0u64, 0usize);
    for i in 0..n {
        tokens += recs[i].token_cost;
        if recs[i].correct && (0..i).all(|j| !accepted[j] || sims[(i, j)] < tau) {
            accepted[i] = true;
            count += 1;
        }
        out.push((tokens, count));
    }
    out
}

/// Records drawn around a few random cluster centres.
pub fn clustered_records(seed: u64, n: usize, d: usize) -> Vec<SolutionRecord> {
    let mut rng = rng(seed);
    let centres: Vec<Vec<f64>> = (0..rng.random_range(1..6)).map(|_| unit(&gaussian(&mut rng, d))).collect();
    (0..n)
        .map(|_| {
            let c = &centres[rng.random_range(0..centres.len())];
            let spread = [0.0, 0.05, 0.2, 0.6][rng.random_range(0..4)];
            let noisy: Vec<f64> = c.iter().zip(gaussian(&mut rng, d)).map(|(a, g)| a + spread * g).collect();
            SolutionRecord {
                embedding: unit(&noisy),
                correct: rng.random_bool(0.8),
                token_cost: rng.random_range(0..5000),
                method_tag: "x".into(),
                order: rng.random_range(0..1000),
                problem_id: None,
            }
        })
        .collect()
}
