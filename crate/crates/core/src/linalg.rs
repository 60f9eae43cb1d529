//! Dense real linear algebra: matrices, vectors, SVD and the rank-truncated
//! pseudo-inverse used to invert relational embeddings.
//!
//! Everything is `f64` and row-major. The SVD is a one-sided Jacobi
//! (Hestenes) sweep, which is simple, deterministic and accurate for the
//! few-hundred-dimensional matrices this crate deals with.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 100;

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * k).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        assert_eq!(self.dim(), other.len(), "vector dimension mismatch");
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        assert_eq!(self.dim(), other.len(), "vector dimension mismatch");
        Vector(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    /// Unit vector in the same direction, or `None` when the norm is below `min_norm`.
    pub fn normalized(&self, min_norm: f64) -> Option<Vector> {
        let n = self.norm();
        if !(n >= min_norm) || !n.is_finite() {
            return None;
        }
        Some(self.scaled(1.0 / n))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m.set(i, i, x);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        Ok(Matrix::from_rows(cols)?.transpose())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::Shape(format!(
                "cannot apply {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(Vector(
            (0..self.rows).map(|r| dot(self.row(r), v)).collect(),
        ))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scaled(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * k).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

// ---------------------------------------------------------------------------
// SVD
// ---------------------------------------------------------------------------

/// Thin singular value decomposition `m = u * diag(sigma) * vt`.
///
/// For an `r x c` input with `k = min(r, c)`: `u` is `r x k`, `sigma` has `k`
/// entries in descending order and `vt` is `k x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vector,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.dim();
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for c in 0..k {
                let v = us.get(r, c) * self.sigma[c];
                us.set(r, c, v);
            }
        }
        us.matmul(&self.vt)
            .expect("svd factors have consistent shapes")
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Left singular vectors are sign-normalized so that the largest-magnitude
/// entry of each is non-negative (first such entry on ties), which makes the
/// output reproducible bit-for-bit.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite(format!(
            "svd input {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // m^T = U S V^T  =>  m = V S U^T
        let t = svd_tall(&m.transpose())?;
        let mut out = SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        normalize_signs(&mut out);
        Ok(out)
    }
}

fn svd_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    // Work on columns stored contiguously.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            let mut e = vec![0.0; cols];
            e[c] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON;
    let mut converged = cols < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            rows,
            cols,
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let mut order: Vec<(usize, f64)> = a.iter().map(|col| norm(col)).enumerate().collect();
    // Stable sort keeps the result deterministic for equal singular values.
    order.sort_by(|x, y| y.1.total_cmp(&x.1));

    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let zero_cut = sigma_max * (rows.max(cols) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut vt_rows = Vec::with_capacity(cols);
    let mut missing = Vec::new();
    for (slot, &(idx, s)) in order.iter().enumerate() {
        if s > zero_cut && s > 0.0 {
            u_cols.push(a[idx].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            u_cols.push(vec![0.0; rows]);
            sigma.push(s);
            missing.push(slot);
        }
        vt_rows.push(v[idx].clone());
    }
    complete_orthonormal(&mut u_cols, &missing);

    let u = Matrix::from_columns(&u_cols)?;
    let vt = Matrix::from_rows(&vt_rows)?;
    let mut out = SvdResult {
        u,
        sigma: Vector(sigma),
        vt,
    };
    normalize_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let xp = &mut lo[p];
    let xq = &mut hi[0];
    for (x, y) in xp.iter_mut().zip(xq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill the listed (zero) columns with unit vectors orthogonal to all others.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    let n = cols.first().map_or(0, Vec::len);
    let mut candidate = 0;
    for &slot in missing {
        while candidate < n {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt for numerical safety.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let d = dot(&e, col);
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= d * c;
                    }
                }
            }
            let nrm = norm(&e);
            if nrm > 1e-8 {
                cols[slot] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

fn normalize_signs(svd: &mut SvdResult) {
    let k = svd.sigma.dim();
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..svd.u.rows() {
            let x = svd.u.get(r, j).abs();
            if x > best_abs {
                best_abs = x;
                best = r;
            }
        }
        if svd.u.get(best, j) < 0.0 {
            for r in 0..svd.u.rows() {
                let x = svd.u.get(r, j);
                svd.u.set(r, j, -x);
            }
            for x in svd.vt.row_mut(j) {
                *x = -*x;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pseudo-inverse
// ---------------------------------------------------------------------------

/// Threshold below which singular values count as zero.
pub fn zero_threshold(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    sigma_max * rows.max(cols) as f64 * f64::EPSILON
}

/// Moore-Penrose pseudo-inverse restricted to the top `rank` singular triples.
///
/// Singular values at or below [`zero_threshold`] are treated as exact zeros
/// even inside the requested rank. An all-zero input yields the zero matrix.
pub fn pinv_low_rank(m: &Matrix, rank: usize) -> Result<Matrix> {
    let svd = svd(m)?;
    pinv_from_svd(&svd, m.rows(), m.cols(), rank)
}

/// Low-rank pseudo-inverse from a precomputed SVD of a `rows x cols` matrix.
pub fn pinv_from_svd(svd: &SvdResult, rows: usize, cols: usize, rank: usize) -> Result<Matrix> {
    let max = rows.min(cols);
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    let sigma_max = svd.sigma.first().copied().unwrap_or(0.0);
    let tau = zero_threshold(sigma_max, rows, cols);
    let mut out = Matrix::zeros(cols, rows);
    for j in 0..rank {
        let s = svd.sigma[j];
        if !(s > tau) {
            continue;
        }
        let inv = 1.0 / s;
        let vrow = svd.vt.row(j);
        for (r, &v) in vrow.iter().enumerate() {
            let coef = v * inv;
            if coef == 0.0 {
                continue;
            }
            let out_row = out.row_mut(r);
            for (c, o) in out_row.iter_mut().enumerate() {
                *o += coef * svd.u.get(c, j);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Means
// ---------------------------------------------------------------------------

/// Arithmetic mean, accumulated in input order.
pub fn mean_vectors(vs: &[Vector]) -> Result<Vector> {
    let first = vs.first().ok_or(Error::Empty("mean of no vectors"))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for v in vs {
        if v.dim() != dim {
            return Err(Error::Shape(format!(
                "mean of vectors with dims {dim} and {}",
                v.dim()
            )));
        }
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    Ok(Vector(acc.into_iter().map(|a| a / n).collect()))
}

/// Arithmetic mean of equally shaped matrices, accumulated in input order.
pub fn mean_matrices(ms: &[Matrix]) -> Result<Matrix> {
    let first = ms.first().ok_or(Error::Empty("mean of no matrices"))?;
    let shape = first.shape();
    let mut acc = Matrix::zeros(shape.0, shape.1);
    for m in ms {
        if m.shape() != shape {
            return Err(Error::Shape(format!(
                "mean of {}x{} and {}x{} matrices",
                shape.0,
                shape.1,
                m.rows(),
                m.cols()
            )));
        }
        for (a, x) in acc.data.iter_mut().zip(&m.data) {
            *a += x;
        }
    }
    let n = ms.len() as f64;
    for a in &mut acc.data {
        *a /= n;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        let err = a.sub(b).unwrap().max_abs();
        assert!(err <= tol, "max abs error {err} > {tol}");
    }

    #[test]
    fn svd_of_diagonal() {
        let s = svd(&Matrix::from_diag(&[4.0, 2.0, 0.0])).unwrap();
        assert_eq!(s.sigma.0, vec![4.0, 2.0, 0.0]);
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.sigma.0, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let m = random_matrix(8, 8, 7);
        let s = svd(&m).unwrap();
        let err = s.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * m.frobenius_norm().max(1.0), "err {err}");
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_handles_wide_and_rank_deficient() {
        let wide = random_matrix(3, 7, 1);
        let s = svd(&wide).unwrap();
        assert_eq!(s.u.shape(), (3, 3));
        assert_eq!(s.vt.shape(), (3, 7));
        assert_close(&s.reconstruct(), &wide, 1e-12);

        // rank one: outer product
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [0.5, -1.0, 2.0];
        let rows: Vec<Vec<f64>> = x
            .iter()
            .map(|a| y.iter().map(|b| a * b).collect())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let s = svd(&m).unwrap();
        assert!(s.sigma[1] < 1e-12 && s.sigma[2] < 1e-12);
        let utu = s.u.transpose().matmul(&s.u).unwrap();
        assert_close(&utu, &Matrix::identity(3), 1e-12);
    }

    #[test]
    fn svd_is_deterministic() {
        let m = random_matrix(12, 9, 3);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::identity(2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn pinv_of_diagonal_by_rank() {
        let d = Matrix::from_diag(&[4.0, 2.0, 0.0]);
        assert_eq!(
            pinv_low_rank(&d, 1).unwrap(),
            Matrix::from_diag(&[0.25, 0.0, 0.0])
        );
        assert_eq!(
            pinv_low_rank(&d, 2).unwrap(),
            Matrix::from_diag(&[0.25, 0.5, 0.0])
        );
        // rank 3 still treats the zero singular value as zero
        assert_eq!(
            pinv_low_rank(&d, 3).unwrap(),
            Matrix::from_diag(&[0.25, 0.5, 0.0])
        );
    }

    #[test]
    fn pinv_rank_errors_and_zero_matrix() {
        let d = Matrix::identity(3);
        assert!(matches!(
            pinv_low_rank(&d, 0),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(matches!(
            pinv_low_rank(&d, 4),
            Err(Error::RankOutOfRange { .. })
        ));
        let z = Matrix::zeros(3, 2);
        assert_eq!(pinv_low_rank(&z, 2).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn pinv_full_rank_moore_penrose() {
        let m = random_matrix(16, 16, 11);
        let p = pinv_low_rank(&m, 16).unwrap();
        let mpm = m.matmul(&p).unwrap().matmul(&m).unwrap();
        assert_close(&mpm, &m, 1e-6);
        let pmp = p.matmul(&m).unwrap().matmul(&p).unwrap();
        assert_close(&pmp, &p, 1e-6);
        let mp = m.matmul(&p).unwrap();
        assert_close(&mp, &mp.transpose(), 1e-6);
        let pm = p.matmul(&m).unwrap();
        assert_close(&pm, &pm.transpose(), 1e-6);
    }

    #[test]
    fn means() {
        let v = mean_vectors(&[Vector(vec![1.0, 0.0]), Vector(vec![3.0, 0.0])]).unwrap();
        assert_eq!(v.0, vec![2.0, 0.0]);
        let m = mean_matrices(&[Matrix::identity(2), Matrix::identity(2).scaled(3.0)]).unwrap();
        assert_eq!(m, Matrix::identity(2).scaled(2.0));
        assert!(mean_vectors(&[]).is_err());
        assert!(mean_matrices(&[]).is_err());
        assert!(mean_vectors(&[Vector(vec![1.0]), Vector(vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn mean_matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<Vector> = (0..5)
            .map(|_| Vector((0..6).map(|_| rng.random_range(-10.0..10.0)).collect()))
            .collect();
        let got = mean_vectors(&vs).unwrap();
        for d in 0..6 {
            // two-pass: naive mean then correction by mean residual
            let naive: f64 = vs.iter().map(|v| v[d]).sum::<f64>() / 5.0;
            let corr: f64 = vs.iter().map(|v| v[d] - naive).sum::<f64>() / 5.0;
            assert!((got[d] - (naive + corr)).abs() <= 1e-12);
        }
    }
}
