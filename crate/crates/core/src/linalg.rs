//! Dense real linear algebra: row-major matrices, a cyclic Jacobi symmetric
//! eigensolver, the Gram-dual route to principal components, orthogonal
//! splitting against a subspace, and numerical rank.

use std::fmt;

use crate::error::{Error, Result};

/// Default off-diagonal convergence tolerance for [`sym_eig`], relative to
/// the Frobenius norm of the input.
pub const JACOBI_TOL: f64 = 1e-12;
/// Eigenvalues with `|λ| < CLAMP_REL · max|λ|` are reported as exactly zero.
pub const CLAMP_REL: f64 = 1e-12;
/// Default relative cut-off used by [`recover_components`].
pub const MIN_LAMBDA_REL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Dense row-major matrix of finite `f64` entries.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &x) in diag.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    /// Builds a matrix whose rows are the given vectors.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid("rows have unequal lengths"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(cols: &[C]) -> Result<Self> {
        Ok(Self::from_rows(cols)?.transpose())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "vector of length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn tr_mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::invalid(format!(
                "vector of length {} does not match {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Largest absolute asymmetry `max |m_ij − m_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `max |MᵀM − I|`, the deviation of the columns from orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        let g = gram_unchecked(self);
        let mut worst = 0.0f64;
        for i in 0..g.rows {
            for j in 0..g.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
///
/// Sweeps run until the largest off-diagonal magnitude drops below
/// `tol · ‖M‖_F`. Eigenvalues come back sorted descending with round-off
/// values (`|λ| < 1e-12 · max|λ|`) set to exactly zero, and each eigenvector
/// is signed so its largest-magnitude entry is positive. The rotation order
/// is fixed, so identical input bits give identical output bits.
pub fn sym_eig(m: &Matrix, tol: f64) -> Result<SymEig> {
    let n = m.rows;
    if n == 0 || m.cols != n {
        return Err(Error::invalid(format!(
            "sym_eig needs a non-empty square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    if m.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let fro = m.frobenius_norm();
    if m.asymmetry() > tol * fro {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (asymmetry {:e})",
            m.asymmetry()
        )));
    }

    let mut a = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = Matrix::identity(n);
    let threshold = tol * fro;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                // Entries already under the convergence bound are left alone.
                if apq.abs() <= threshold {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal eigenvalues in diagonal order.
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));

    let mut eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let max_abs = eigenvalues.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    for lam in &mut eigenvalues {
        if lam.abs() < CLAMP_REL * max_abs {
            *lam = 0.0;
        }
    }

    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        canonical_sign(&mut col);
        for (r, x) in col.into_iter().enumerate() {
            eigenvectors.set(r, dst, x);
        }
    }

    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

// Applies the (p, q) plane rotation to both sides of `a` and accumulates it
// into the columns of `v`. The annihilated pair is set to exactly zero.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows;
    let ad = &mut a.data;
    for k in 0..n {
        let (ip, iq) = (k * n + p, k * n + q);
        let (akp, akq) = (ad[ip], ad[iq]);
        ad[ip] = c * akp - s * akq;
        ad[iq] = s * akp + c * akq;
    }
    let (rp, rq) = (p * n, q * n);
    for k in 0..n {
        let (apk, aqk) = (ad[rp + k], ad[rq + k]);
        ad[rp + k] = c * apk - s * aqk;
        ad[rq + k] = s * apk + c * aqk;
    }
    ad[rp + q] = 0.0;
    ad[rq + p] = 0.0;
    let vd = &mut v.data;
    for k in 0..n {
        let (ip, iq) = (k * n + p, k * n + q);
        let (vkp, vkq) = (vd[ip], vd[iq]);
        vd[ip] = c * vkp - s * vkq;
        vd[iq] = s * vkp + c * vkq;
    }
}

/// Flips `x` so that its largest-magnitude entry (first on ties) is positive.
pub fn canonical_sign(x: &mut [f64]) {
    let mut best = 0usize;
    for (i, v) in x.iter().enumerate() {
        if v.abs() > x[best].abs() {
            best = i;
        }
    }
    if x.get(best).is_some_and(|&v| v < 0.0) {
        x.iter_mut().for_each(|v| *v = -*v);
    }
}

/// `HᵀH` for a `d × N` matrix `H`, mirrored from the upper triangle.
pub fn gram(h: &Matrix) -> Result<Matrix> {
    if h.rows == 0 || h.cols == 0 {
        return Err(Error::invalid("gram needs a non-empty matrix"));
    }
    if h.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    Ok(gram_unchecked(h))
}

fn gram_unchecked(h: &Matrix) -> Matrix {
    let n = h.cols;
    let ht = h.transpose();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(ht.row(i), ht.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

/// Default `min_lambda` for [`recover_components`]: `1e-10 · λ₁`.
pub fn default_min_lambda(geig: &SymEig) -> f64 {
    MIN_LAMBDA_REL * geig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0)
}

/// Lifts eigenvectors of `G = HᵀH` to principal directions of `HHᵀ` via
/// `u_k = H v_k / √λ_k`, keeping only components with `λ_k > min_lambda`.
///
/// Returns the `d × r` basis and the retained eigenvalues (Gram scale).
pub fn recover_components(
    h: &Matrix,
    geig: &SymEig,
    min_lambda: f64,
) -> Result<(Matrix, Vec<f64>)> {
    let n = h.cols;
    if geig.eigenvectors.shape() != (n, n) || geig.eigenvalues.len() != n {
        return Err(Error::invalid(format!(
            "gram eigendecomposition is not {n}x{n}"
        )));
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&k| geig.eigenvalues[k] > min_lambda && geig.eigenvalues[k] > 0.0)
        .collect();
    if keep.is_empty() {
        return Err(Error::DegenerateSpectrum);
    }
    let d = h.rows;
    let mut u = Matrix::zeros(d, keep.len());
    let mut lambdas = Vec::with_capacity(keep.len());
    for (out_col, &k) in keep.iter().enumerate() {
        let lam = geig.eigenvalues[k];
        let vk = geig.eigenvectors.column(k);
        let hv = h.mat_vec(&vk)?;
        let inv = 1.0 / lam.sqrt();
        for (r, x) in hv.into_iter().enumerate() {
            u.set(r, out_col, x * inv);
        }
        lambdas.push(lam);
    }
    Ok((u, lambdas))
}

/// Splits `x` into its projection onto span(`U`) and the orthogonal residual.
///
/// `U` must have orthonormal columns. The parts satisfy `par + perp == x`
/// as computed, because `perp` is formed as `x − par`.
pub fn project_split(u: &Matrix, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.rows != x.len() {
        return Err(Error::invalid(format!(
            "basis has {} rows but vector has length {}",
            u.rows,
            x.len()
        )));
    }
    let coeffs = u.tr_mat_vec(x)?;
    let par = u.mat_vec(&coeffs)?;
    let perp = x.iter().zip(&par).map(|(a, b)| a - b).collect();
    Ok((par, perp))
}

/// Count of singular values strictly above `rel_tol · σ₁`; zero when `σ₁ = 0`.
pub fn numerical_rank(singular_values: &[f64], rel_tol: f64) -> usize {
    let Some(&first) = singular_values.first() else {
        return 0;
    };
    if first <= 0.0 {
        return 0;
    }
    let cut = rel_tol * first;
    singular_values.iter().filter(|&&s| s > cut).count()
}

/// Singular values of `m`, descending, by one-sided (Hestenes) Jacobi.
///
/// Orthogonalising columns directly keeps small singular values accurate
/// relative to `σ₁` down to round-off, which the squared Gram route cannot.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let vectors: Vec<Vec<f64>> = if m.rows >= m.cols {
        (0..m.cols).map(|c| m.column(c)).collect()
    } else {
        (0..m.rows).map(|r| m.row(r).to_vec()).collect()
    };
    let mut sv: Vec<f64> = hestenes(vectors, None)?.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Singular values of `m` with an orthonormal basis (`d × r`, one column per
/// singular value above `rel_tol · σ₁`) of its row space.
pub fn row_space(m: &Matrix, rel_tol: f64) -> Result<(Vec<f64>, Matrix)> {
    // Orthogonalised rows span the row space directly when they are the
    // short side; otherwise rotate the columns and keep the accumulated
    // right singular vectors.
    let mut pairs: Vec<(f64, Vec<f64>)> = if m.rows <= m.cols {
        let rows: Vec<Vec<f64>> = (0..m.rows).map(|r| m.row(r).to_vec()).collect();
        hestenes(rows, None)?
            .into_iter()
            .map(|c| {
                let n = norm(&c);
                let unit = if n > 0.0 { c.iter().map(|x| x / n).collect() } else { c };
                (n, unit)
            })
            .collect()
    } else {
        let cols: Vec<Vec<f64>> = (0..m.cols).map(|c| m.column(c)).collect();
        let mut v: Vec<Vec<f64>> = (0..m.cols)
            .map(|i| (0..m.cols).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let cols = hestenes(cols, Some(&mut v))?;
        cols.iter().map(|c| norm(c)).zip(v).collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sv: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let r = numerical_rank(&sv, rel_tol);
    let basis = if r == 0 {
        Matrix::zeros(m.cols, 0)
    } else {
        let vecs: Vec<&[f64]> = pairs[..r].iter().map(|p| p.1.as_slice()).collect();
        Matrix::from_columns(&vecs)?
    };
    Ok((sv, basis))
}

// Mutually orthogonalises `cols` by plane rotations until every pair is
// orthogonal to working precision; the same rotations are applied to `acc`
// when given. The result spans the same space and its norms are the singular
// values of the matrix with these vectors as columns.
fn hestenes(mut cols: Vec<Vec<f64>>, mut acc: Option<&mut Vec<Vec<f64>>>) -> Result<Vec<Vec<f64>>> {
    if cols.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let n = cols.len();
    let tol = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, i, j, c, s);
                if let Some(v) = acc.as_deref_mut() {
                    rotate_pair(v, i, j, c, s);
                }
            }
        }
        if !rotated {
            return Ok(cols);
        }
    }
    Err(Error::NoConvergence(MAX_SWEEPS))
}

fn rotate_pair(vs: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = vs.split_at_mut(j);
    for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Orthonormal basis for the span of `vectors` by modified Gram–Schmidt with
/// one re-orthogonalisation pass. Vectors whose residual falls below
/// `rel_tol` times their original norm are skipped.
pub fn orthonormal_basis<V: AsRef<[f64]>>(vectors: &[V], rel_tol: f64) -> Result<Matrix> {
    let d = vectors.first().map_or(0, |v| v.as_ref().len());
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::invalid("vectors have unequal lengths"));
        }
        let original = norm(v);
        let mut w = v.to_vec();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nw = norm(&w);
        if original > 0.0 && nw > rel_tol * original {
            w.iter_mut().for_each(|x| *x /= nw);
            basis.push(w);
        }
    }
    if basis.is_empty() {
        return Ok(Matrix::zeros(d, 0));
    }
    Matrix::from_columns(&basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_spectrum() {
        let e = sym_eig(&Matrix::identity(3), JACOBI_TOL).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert!(e.eigenvectors.orthonormality_error() < 1e-15);
    }

    #[test]
    fn diagonal_spectrum_sorted() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 3.0]), JACOBI_TOL).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors.column(0), vec![0.0, 1.0]);
        assert_eq!(e.eigenvectors.column(1), vec![1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m, JACOBI_TOL), Err(Error::InvalidInput(_))));
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        let nan = Matrix {
            rows: 1,
            cols: 1,
            data: vec![f64::INFINITY],
        };
        assert!(matches!(sym_eig(&nan, JACOBI_TOL), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_matrix_has_zero_spectrum() {
        let e = sym_eig(&Matrix::zeros(3, 3), JACOBI_TOL).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 3]);
    }

    #[test]
    fn residuals_and_trace_on_random_symmetric() {
        for seed in 0..20 {
            let a = random_matrix(7, 7, seed);
            let m = a.matmul(&a.transpose()).unwrap();
            let e = sym_eig(&m, JACOBI_TOL).unwrap();
            let scale = m.frobenius_norm();
            assert!(e.eigenvectors.orthonormality_error() < 1e-10);
            for k in 0..7 {
                let v = e.eigenvectors.column(k);
                let mv = m.mat_vec(&v).unwrap();
                for (x, y) in mv.iter().zip(&v) {
                    assert!((x - e.eigenvalues[k] * y).abs() < 1e-8 * scale);
                }
            }
            let sum: f64 = e.eigenvalues.iter().sum();
            assert!((sum - m.trace()).abs() < 1e-8 * scale);
            assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn deterministic_bits() {
        let a = random_matrix(6, 6, 5);
        let m = a.matmul(&a.transpose()).unwrap();
        assert_eq!(sym_eig(&m, JACOBI_TOL).unwrap(), sym_eig(&m, JACOBI_TOL).unwrap());
    }

    #[test]
    fn gram_examples() {
        let h = Matrix::from_columns(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(gram(&h).unwrap(), Matrix::identity(2));
        let h = Matrix::from_columns(&[[3.0, 4.0]]).unwrap();
        assert_eq!(gram(&h).unwrap().as_slice(), &[25.0]);
    }

    #[test]
    fn gram_matches_triple_loop() {
        let h = random_matrix(6, 3, 7);
        let g = gram(&h).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for r in 0..6 {
                    s += h.get(r, i) * h.get(r, j);
                }
                assert!((g.get(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn recover_single_column() {
        let h = Matrix::from_columns(&[[3.0, 4.0]]).unwrap();
        let g = sym_eig(&gram(&h).unwrap(), JACOBI_TOL).unwrap();
        let (u, l) = recover_components(&h, &g, default_min_lambda(&g)).unwrap();
        assert_eq!(l, vec![25.0]);
        assert!((u.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((u.get(1, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn recover_equal_pair() {
        let h = Matrix::from_columns(&[[2.0, 0.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        let g = sym_eig(&gram(&h).unwrap(), JACOBI_TOL).unwrap();
        let (u, l) = recover_components(&h, &g, default_min_lambda(&g)).unwrap();
        assert_eq!(l, vec![4.0, 4.0]);
        assert!(u.orthonormality_error() < 1e-12);
        // Spans the e1/e3 plane: no energy on e2.
        assert!(u.get(1, 0).abs() < 1e-15 && u.get(1, 1).abs() < 1e-15);
    }

    #[test]
    fn recover_degenerate() {
        let h = Matrix::zeros(3, 2);
        let g = sym_eig(&gram(&h).unwrap(), JACOBI_TOL).unwrap();
        assert!(matches!(
            recover_components(&h, &g, default_min_lambda(&g)),
            Err(Error::DegenerateSpectrum)
        ));
    }

    #[test]
    fn split_examples() {
        let u = Matrix::from_columns(&[[1.0, 0.0, 0.0]]).unwrap();
        let (par, perp) = project_split(&u, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(par, vec![1.0, 0.0, 0.0]);
        assert_eq!(perp, vec![0.0; 3]);
        let (par, perp) = project_split(&u, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(par, vec![0.0; 3]);
        assert_eq!(perp, vec![0.0, 1.0, 0.0]);
        assert!(project_split(&u, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&[5.0, 3.0, 1e-14], 1e-9), 2);
        assert_eq!(numerical_rank(&[0.0, 0.0], 0.5), 0);
        assert_eq!(numerical_rank(&[], 1e-9), 0);
    }

    #[test]
    fn known_rank_product() {
        let a = random_matrix(5, 3, 5);
        let b = random_matrix(3, 6, 105);
        let m = a.matmul(&b).unwrap();
        let sv = singular_values(&m).unwrap();
        assert_eq!(numerical_rank(&sv, 1e-9), 3);
    }

    #[test]
    fn row_space_of_rank_two() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 2.0, 0.0]]).unwrap();
        let (sv, basis) = row_space(&m, 1e-9).unwrap();
        assert_eq!(numerical_rank(&sv, 1e-9), 2);
        assert_eq!(basis.shape(), (3, 2));
        assert!(basis.orthonormality_error() < 1e-14);
        assert!(basis.get(2, 0).abs() < 1e-15 && basis.get(2, 1).abs() < 1e-15);
    }

    #[test]
    fn row_space_of_wide_and_tall_agree() {
        let a = random_matrix(12, 3, 1);
        let b = random_matrix(3, 5, 2);
        let tall = a.matmul(&b).unwrap();
        let (sv_t, basis_t) = row_space(&tall, 1e-9).unwrap();
        let (_, basis_w) = row_space(&b, 1e-9).unwrap();
        assert_eq!(numerical_rank(&sv_t, 1e-9), 3);
        assert!(basis_t.orthonormality_error() < 1e-12);
        // Same 3-dimensional row space: projecting one basis onto the other is lossless.
        for c in 0..3 {
            let (_, perp) = project_split(&basis_w, &basis_t.column(c)).unwrap();
            assert!(norm(&perp) < 1e-10);
        }
    }

    #[test]
    fn gram_schmidt_basis() {
        let b = orthonormal_basis(&[[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 1.0, 1.0]], 1e-10)
            .unwrap();
        assert_eq!(b.cols(), 2);
        assert!(b.orthonormality_error() < 1e-14);
    }
}
