//! Dense matrix kernels, Gram-Schmidt orthonormalization, a one-sided Jacobi
//! SVD used as the truncation-error oracle, and magnitude top-k selection.
//!
//! Everything here is `f64` and single-threaded. The SVD is only meant for
//! matrices whose smaller side is at most [`SVD_MAX_MIN_DIM`].

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest `min(rows, cols)` accepted by [`svd`].
pub const SVD_MAX_MIN_DIM: usize = 64;

/// Jacobi sweep cap for [`svd`].
pub const SVD_MAX_SWEEPS: usize = 10_000;

/// Column norm below which Gram-Schmidt treats a column as degenerate.
pub const DEGENERATE_COLUMN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("{op} requires {requirement}")]
    Contract {
        op: &'static str,
        requirement: String,
    },
    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    ConvergenceFailure { sweeps: usize, residual: f64 },
    #[error("cosine similarity is undefined when both vectors have zero norm")]
    UndefinedSimilarity,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
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
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(LinalgError::DimensionMismatch {
                op: "from_rows",
                left: (1, cols),
                right: (1, bad.len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Fills a matrix with standard normal entries, column by column, so a
    /// matrix with more columns extends one with fewer from the same stream.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m.data[r * cols + c] = rng.sample(StandardNormal);
            }
        }
        m
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
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

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
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

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for r in 0..self.rows {
            out.data[r * k..(r + 1) * k].copy_from_slice(&self.row(r)[..k]);
        }
        out
    }
}

/// Dense product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_at_b",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_a_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of [`orthonormalize`]. `reseeded` lists columns that were
/// numerically dependent on earlier ones and got replaced by random
/// directions.
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    pub q: Matrix,
    pub reseeded: Vec<usize>,
}

/// Modified Gram-Schmidt with one re-orthogonalization pass per column.
///
/// Degenerate columns are replaced by a random unit vector orthogonal to
/// the preceding columns so the factor keeps its shape.
pub fn orthonormalize<R: Rng + ?Sized>(m: &Matrix, rng: &mut R) -> Result<Orthonormalized> {
    let (n, k) = m.shape();
    if n < k {
        return Err(LinalgError::Contract {
            op: "orthonormalize",
            requirement: format!("rows >= cols, got {n}x{k}"),
        });
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut reseeded = Vec::new();
    for c in 0..k {
        let mut v = m.column(c);
        let mut fresh = false;
        loop {
            for _ in 0..2 {
                for prev in &cols {
                    let proj = dot(prev, &v);
                    for (vi, pi) in v.iter_mut().zip(prev) {
                        *vi -= proj * pi;
                    }
                }
            }
            let len = norm(&v);
            if len >= DEGENERATE_COLUMN_NORM {
                v.iter_mut().for_each(|x| *x /= len);
                break;
            }
            if !fresh {
                reseeded.push(c);
                fresh = true;
            }
            v = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        }
        cols.push(v);
    }
    let mut q = Matrix::zeros(n, k);
    for (c, col) in cols.iter().enumerate() {
        q.set_column(c, col);
    }
    Ok(Orthonormalized { q, reseeded })
}

/// Thin singular value decomposition `M = U diag(S) Vᵀ` with `S`
/// nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// n x min(n, m), orthonormal columns.
    pub u: Matrix,
    pub s: Vec<f64>,
    /// m x min(n, m), orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                let x = us.get(r, c) * s;
                us.set(r, c, x);
            }
        }
        matmul_a_bt(&us, &self.v).expect("svd factors are conformant")
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    if rows.min(cols) > SVD_MAX_MIN_DIM {
        return Err(LinalgError::Contract {
            op: "svd",
            requirement: format!("min(rows, cols) <= {SVD_MAX_MIN_DIM}, got {rows}x{cols}"),
        });
    }
    if let Some(index) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite { index });
    }
    if rows < cols {
        let t = svd(&m.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }

    // Columns of `a` are rotated until mutually orthogonal; `v` accumulates
    // the rotations. Stored column-major for cache-friendly column access.
    let n = cols;
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON;
    // Pairs involving a numerically null column carry no information.
    let negligible = m.data.iter().map(|x| x * x).sum::<f64>() * 1e-30;
    let mut converged = n < 2;
    let mut residual = 0.0;
    for _sweep in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                let off = gamma.abs() / scale.max(f64::MIN_POSITIVE);
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
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
        return Err(LinalgError::ConvergenceFailure {
            sweeps: SVD_MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<(usize, f64)> = a.iter().map(|col| norm(col)).enumerate().collect();
    order.sort_by(|x, y| {
        y.1.partial_cmp(&x.1)
            .unwrap_or(Ordering::Equal)
            .then(x.0.cmp(&y.0))
    });

    let smax = order.first().map_or(0.0, |o| o.1);
    let zero_cut = smax * (rows as f64) * f64::EPSILON;
    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending_null = Vec::new();
    for (idx, sigma) in order {
        v_cols.push(v[idx].clone());
        if sigma > zero_cut && sigma > 0.0 {
            s.push(sigma);
            u_cols.push(a[idx].iter().map(|x| x / sigma).collect());
        } else {
            s.push(if sigma > 0.0 { sigma } else { 0.0 });
            pending_null.push(u_cols.len());
            u_cols.push(Vec::new());
        }
    }
    // Left vectors for (numerically) zero singular values are completed
    // deterministically from the standard basis.
    let mut basis = 0;
    for slot in pending_null {
        loop {
            let mut e = vec![0.0; rows];
            e[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for col in u_cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(col, &e);
                    for (ei, ci) in e.iter_mut().zip(col) {
                        *ei -= proj * ci;
                    }
                }
            }
            let len = norm(&e);
            if len > 1e-8 {
                e.iter_mut().for_each(|x| *x /= len);
                u_cols[slot] = e;
                break;
            }
        }
    }

    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    for c in 0..n {
        u.set_column(c, &u_cols[c]);
        vm.set_column(c, &v_cols[c]);
    }
    Ok(SvdResult { u, s, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// `sqrt(sum_{i >= r} s_i^2)`: the Frobenius error of the best rank-`r`
/// approximation given singular values `s`.
pub fn truncation_error(s: &[f64], r: usize) -> Result<f64> {
    if r > s.len() {
        return Err(LinalgError::Contract {
            op: "truncation_error",
            requirement: format!("r <= {} singular values, got r = {r}", s.len()),
        });
    }
    Ok(s[r..].iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(LinalgError::Contract {
                op: "SparseVector::new",
                requirement: format!(
                    "equal index/value counts, got {} and {}",
                    indices.len(),
                    values.len()
                ),
            });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i >= dim) {
            return Err(LinalgError::Contract {
                op: "SparseVector::new",
                requirement: format!("strictly increasing indices below {dim}"),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.scatter_into(&mut out);
        out
    }

    pub fn scatter_into(&self, out: &mut [f64]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
    }
}

/// Keeps the `k` largest-magnitude entries; equal magnitudes go to the
/// lower index.
pub fn top_k_select(v: &[f64], k: usize) -> Result<SparseVector> {
    if k > v.len() {
        return Err(LinalgError::Contract {
            op: "top_k_select",
            requirement: format!("k <= {}, got {k}", v.len()),
        });
    }
    let by_rank = |a: &usize, b: &usize| -> Ordering {
        v[*b]
            .abs()
            .partial_cmp(&v[*a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..v.len()).collect();
    if k < v.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    let values = kept.iter().map(|&i| v[i]).collect();
    SparseVector::new(v.len(), kept, values)
}

/// `<a, b> / (|a| |b|)`, clamped to [-1, 1]. Returns 0 when exactly one
/// side is the zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "cosine_similarity",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    match (na > 0.0, nb > 0.0) {
        (false, false) => Err(LinalgError::UndefinedSimilarity),
        (true, true) => Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0)),
        _ => Ok(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn gram_error(q: &Matrix) -> f64 {
        let g = matmul_at_b(q, q).unwrap();
        max_abs_diff(&g, &Matrix::identity(q.cols()))
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let m = Matrix::random_normal(3, 4, &mut rng(1));
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let p = matmul(&a, &b).unwrap();
        assert_eq!(p.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(7);
        let a = Matrix::random_normal(8, 5, &mut r);
        let b = Matrix::random_normal(5, 3, &mut r);
        assert!(max_abs_diff(&matmul(&a, &b).unwrap(), &naive_matmul(&a, &b)) < 1e-12);
        let at = a.transpose();
        assert!(max_abs_diff(&matmul_at_b(&at, &b).unwrap(), &naive_matmul(&a, &b)) < 1e-12);
        let bt = b.transpose();
        assert!(max_abs_diff(&matmul_a_bt(&a, &bt).unwrap(), &naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let err = matmul(&a, &a).unwrap_err();
        assert!(matches!(err, LinalgError::DimensionMismatch { .. }));
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn orthonormalize_cases() {
        let q = Matrix::identity(4).leading_columns(2);
        let out = orthonormalize(&q, &mut rng(0)).unwrap();
        assert!(max_abs_diff(&out.q, &q) < 1e-12);
        assert!(out.reseeded.is_empty());

        let col = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let out = orthonormalize(&col, &mut rng(0)).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((out.q.get(0, 0) - h).abs() < 1e-15 && (out.q.get(1, 0) - h).abs() < 1e-15);

        let m = Matrix::random_normal(10, 3, &mut rng(3));
        let out = orthonormalize(&m, &mut rng(0)).unwrap();
        assert!(gram_error(&out.q) < 1e-10);
    }

    #[test]
    fn orthonormalize_reseeds_dependent_columns() {
        // Second column duplicates the first; third is zero.
        let m = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.0],
            vec![2.0, 4.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 0.0],
        ])
        .unwrap();
        let out = orthonormalize(&m, &mut rng(5)).unwrap();
        assert_eq!(out.reseeded, vec![1, 2]);
        assert!(gram_error(&out.q) < 1e-10);
        assert!(orthonormalize(&Matrix::zeros(2, 3), &mut rng(0)).is_err());
    }

    #[test]
    fn svd_diagonal_and_zero() {
        let d = Matrix::diag(&[1.0, 3.0, 2.0]);
        let r = svd(&d).unwrap();
        assert!((r.s[0] - 3.0).abs() < 1e-14);
        assert!((r.s[1] - 2.0).abs() < 1e-14);
        assert!((r.s[2] - 1.0).abs() < 1e-14);

        let z = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(z.s.iter().all(|&s| s == 0.0));
        assert!(gram_error(&z.u) < 1e-12);
        assert!(gram_error(&z.v) < 1e-12);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut r = rng(11);
        for (rows, cols) in [(6, 4), (4, 6), (20, 30), (1, 5), (7, 1)] {
            let m = Matrix::random_normal(rows, cols, &mut r);
            let out = svd(&m).unwrap();
            let rel = out.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(rel < 1e-8, "{rows}x{cols}: {rel}");
            assert!(out.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(gram_error(&out.u) < 1e-8);
            assert!(gram_error(&out.v) < 1e-8);
        }
    }

    #[test]
    fn svd_rank_deficient_completes_basis() {
        let u = Matrix::random_normal(5, 1, &mut rng(2));
        let v = Matrix::random_normal(1, 4, &mut rng(3));
        let m = matmul(&u, &v).unwrap();
        let out = svd(&m).unwrap();
        assert!(out.s[1] < 1e-12 * out.s[0]);
        assert!(gram_error(&out.u) < 1e-8);
        let rel = out.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(rel < 1e-8);
    }

    #[test]
    fn svd_rejects_large_inputs() {
        let m = Matrix::zeros(65, 65);
        assert!(matches!(svd(&m), Err(LinalgError::Contract { .. })));
    }

    #[test]
    fn truncation_error_values() {
        let s = [3.0, 2.0, 1.0];
        assert!((truncation_error(&s, 1).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(truncation_error(&s, 3).unwrap(), 0.0);
        assert_eq!(truncation_error(&[5.0, 0.0, 0.0], 0).unwrap(), 5.0);
        assert!(truncation_error(&s, 4).is_err());
    }

    #[test]
    fn top_k_examples() {
        let v = [3.0, -1.0, 0.5, -4.0];
        let s = top_k_select(&v, 2).unwrap();
        assert_eq!(s.indices(), &[0, 3]);
        assert_eq!(s.values(), &[3.0, -4.0]);

        let all = top_k_select(&v, 4).unwrap();
        assert_eq!(all.to_dense(), v.to_vec());

        let tie = top_k_select(&[2.0, -2.0, 1.0], 1).unwrap();
        assert_eq!(tie.indices(), &[0]);
        assert_eq!(tie.values(), &[2.0]);

        assert_eq!(top_k_select(&v, 0).unwrap().nnz(), 0);
        assert!(top_k_select(&v, 5).is_err());
    }

    #[test]
    fn sparse_vector_validation() {
        assert!(SparseVector::new(3, vec![1, 1], vec![0.0, 0.0]).is_err());
        assert!(SparseVector::new(3, vec![3], vec![0.0]).is_err());
        assert!(SparseVector::new(3, vec![0], vec![]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -3.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]),
            Err(LinalgError::UndefinedSimilarity)
        );

        let g = [3.0, -1.0, 0.5, -4.0];
        let kept = top_k_select(&g, 2).unwrap().to_dense();
        // Direct dot product: <g, kept> = 9 + 16 = 25; |kept| = 5; |g| = sqrt(26.25).
        let direct = 25.0 / (5.0 * 26.25f64.sqrt());
        let cos = cosine_similarity(&g, &kept).unwrap();
        assert!((cos - direct).abs() < 1e-15);
        assert!((cos - 0.97590).abs() < 1e-5);
    }
}
