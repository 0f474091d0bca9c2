//! Dense real-matrix primitives.
//!
//! Everything downstream (prototypes, features, encoder outputs) is carried as an
//! [`EmbeddingMatrix`]: row-major `f64` storage with explicit dimensions. Matrices in
//! this crate are small (K ≤ 1000 classes, d ≤ 512), so the SVD is a one-sided Jacobi
//! iteration that is simple to audit and accurate to working precision.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold below which a row is considered degenerate for normalization.
pub const ZERO_ROW_NORM: f64 = 1e-12;

/// Tolerance used when checking the `unit_rows` invariant.
pub const UNIT_ROW_TOL: f64 = 1e-9;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Dense K×d real matrix, row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    #[serde(default)]
    unit_rows: bool,
}

impl fmt::Debug for EmbeddingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "EmbeddingMatrix {}x{} (unit_rows={})", self.rows, self.cols, self.unit_rows)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        Ok(())
    }
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data, rejecting empty shapes and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("rows >= 1 and cols >= 1", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} entries for {rows}x{cols}", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(format!(
                "non-finite entry at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data, unit_rows: false })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("rows of equal length", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols], unit_rows: false }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m.unit_rows = true;
        m
    }

    /// Internal constructor for arithmetic results; skips the finiteness scan.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data, unit_rows: false }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access to the raw buffer. Clears the `unit_rows` flag.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.unit_rows = false;
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable row access. Clears the `unit_rows` flag.
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        self.unit_rows = false;
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.unit_rows = false;
        self.data[i * self.cols + j] = value;
    }

    pub fn unit_rows(&self) -> bool {
        self.unit_rows
    }

    /// Sets the `unit_rows` flag after verifying every row norm is within
    /// [`UNIT_ROW_TOL`] of one.
    pub fn mark_unit_rows(&mut self) -> Result<()> {
        for (i, r) in self.row_iter().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > UNIT_ROW_TOL {
                return Err(Error::DimensionMismatch(format!("row {i} has norm {n}, not unit")));
            }
        }
        self.unit_rows = true;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects a subset of rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data, unit_rows: self.unit_rows }
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                format!("{}x? operand", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_raw(m, n, out))
    }

    /// `self · otherᵀ`, row-by-row dot products.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                format!("?x{} operand", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for a in self.row_iter() {
            for b in other.row_iter() {
                out.push(dot(a, b));
            }
        }
        Ok(Self::from_raw(self.rows, other.rows, out))
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * factor).collect())
    }

    /// Σ m_ij².
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// X·Xᵀ. The upper triangle is computed once and mirrored, so the result is
    /// symmetric bit for bit.
    pub fn gram(&self) -> Self {
        let k = self.rows;
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            let ri = self.row(i);
            for j in i..k {
                let v = dot(ri, self.row(j));
                out[i * k + j] = v;
                out[j * k + i] = v;
            }
        }
        Self::from_raw(k, k, out)
    }

    /// Scales every row to unit Euclidean norm and sets `unit_rows`.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let n = norm(row);
            if n <= ZERO_ROW_NORM {
                return Err(Error::ZeroRow { row: i, norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        out.unit_rows = true;
        Ok(out)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.row_iter().map(norm).collect()
    }

    /// Largest absolute off-diagonal entry of a square matrix.
    pub fn max_abs_offdiag(&self) -> f64 {
        let mut best = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j {
                    best = best.max(self.get(i, j).abs());
                }
            }
        }
        best
    }

    /// Singular value decomposition `self = U·diag(σ)·Rᵀ` for K ≤ d.
    pub fn svd(&self) -> Result<SvdFactors> {
        svd(self)
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

/// Squared Euclidean distance.
#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Σ m_ij² as a free function.
pub fn frobenius_sq(m: &EmbeddingMatrix) -> f64 {
    m.frobenius_sq()
}

/// X·Xᵀ as a free function.
pub fn gram(x: &EmbeddingMatrix) -> EmbeddingMatrix {
    x.gram()
}

pub fn normalize_rows(x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    x.normalize_rows()
}

/// Factors of `V = U·diag(σ)·Rᵀ`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// K×K orthogonal.
    pub u: EmbeddingMatrix,
    /// Nonnegative, descending, length K.
    pub sigma: Vec<f64>,
    /// d×K with orthonormal columns.
    pub r: EmbeddingMatrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> EmbeddingMatrix {
        let k = self.sigma.len();
        let mut us = self.u.clone();
        for i in 0..k {
            for j in 0..k {
                let v = us.get(i, j) * self.sigma[j];
                us.data[i * k + j] = v;
            }
        }
        us.matmul_t(&self.r).expect("factor shapes agree by construction")
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma.last().copied().unwrap_or(0.0)
    }
}

/// One-sided Jacobi SVD over the rows of `v` (requires rows ≤ cols).
///
/// Plane rotations are applied to pairs of rows until every pair is orthogonal to
/// working precision; the accumulated rotation gives `Uᵀ`, the row norms give σ and the
/// normalized rows give the columns of R. Columns of `u` are signed so their first
/// nonzero entry is nonnegative.
pub fn svd(v: &EmbeddingMatrix) -> Result<SvdFactors> {
    let (k, d) = v.shape();
    if k > d {
        return Err(Error::DimensionMismatch(format!(
            "svd expects rows <= cols, got {k}x{d}"
        )));
    }
    let mut w = v.data.clone();
    let mut q = EmbeddingMatrix::identity(k).data;
    let tol = 4.0 * f64::EPSILON;

    let mut converged = false;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        residual = 0.0_f64;
        for i in 0..k {
            for j in (i + 1)..k {
                let (a, b, g) = {
                    let ri = &w[i * d..(i + 1) * d];
                    let rj = &w[j * d..(j + 1) * d];
                    (dot(ri, ri), dot(rj, rj), dot(ri, rj))
                };
                if a == 0.0 || b == 0.0 {
                    continue;
                }
                let scaled = g.abs() / (a * b).sqrt();
                residual = residual.max(scaled);
                if scaled <= tol || g.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, d, i, j, c, s);
                rotate_rows(&mut q, k, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps, residual });
    }

    let norms: Vec<f64> = w.chunks_exact(d).map(norm).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut u = EmbeddingMatrix::zeros(k, k);
    let mut r_cols: Vec<Option<Vec<f64>>> = vec![None; k];
    let mut sigma = Vec::with_capacity(k);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..k {
            u.data[row * k + col] = q[src * k + row];
        }
        let s = norms[src];
        if s > 1e-300 {
            r_cols[col] = Some(w[src * d..(src + 1) * d].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            sigma.push(0.0);
        }
    }
    complete_orthonormal(&mut r_cols, d);

    for col in 0..k {
        let scale = (0..k).map(|row| u.data[row * k + col].abs()).fold(0.0, f64::max);
        let first = (0..k)
            .map(|row| u.data[row * k + col])
            .find(|x| x.abs() > 1e-12 * scale.max(1.0));
        if matches!(first, Some(x) if x < 0.0) {
            for row in 0..k {
                u.data[row * k + col] = -u.data[row * k + col];
            }
            if let Some(c) = r_cols[col].as_mut() {
                c.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    let mut r = EmbeddingMatrix::zeros(d, k);
    for (col, c) in r_cols.into_iter().enumerate() {
        let c = c.expect("completed above");
        for (row, x) in c.into_iter().enumerate() {
            r.data[row * k + col] = x;
        }
    }
    Ok(SvdFactors { u, sigma, r })
}

fn rotate_rows(buf: &mut [f64], width: usize, i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(j * width);
    let ri = &mut head[i * width..(i + 1) * width];
    let rj = &mut tail[..width];
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills missing columns with canonical basis vectors orthogonalized against the rest.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], d: usize) {
    let mut basis = 0;
    for idx in 0..cols.len() {
        if cols[idx].is_some() {
            continue;
        }
        loop {
            assert!(basis < d, "not enough dimensions to complete basis");
            let mut e = vec![0.0; d];
            e[basis] = 1.0;
            basis += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let p = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
                }
            }
            let n = norm(&e);
            if n > 1e-8 {
                e.iter_mut().for_each(|x| *x /= n);
                cols[idx] = Some(e);
                break;
            }
        }
    }
}

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::shape(
            format!("square system with {n} rows"),
            format!("{}x{} and {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let m = b.cols();
    let mut lhs = a.data.clone();
    let mut rhs = b.data.clone();
    let scale = lhs.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| lhs[x * n + col].abs().total_cmp(&lhs[y * n + col].abs()))
            .expect("non-empty range");
        let p = lhs[pivot * n + col];
        if p.abs() <= 1e-14 * scale {
            return Err(Error::RankDeficient { sigma_min: p.abs() });
        }
        if pivot != col {
            for j in 0..n {
                lhs.swap(col * n + j, pivot * n + j);
            }
            for j in 0..m {
                rhs.swap(col * m + j, pivot * m + j);
            }
        }
        for row in (col + 1)..n {
            let f = lhs[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lhs[row * n + j] -= f * lhs[col * n + j];
            }
            for j in 0..m {
                rhs[row * m + j] -= f * rhs[col * m + j];
            }
        }
    }
    let mut x = vec![0.0; n * m];
    for row in (0..n).rev() {
        for j in 0..m {
            let mut acc = rhs[row * m + j];
            for c in (row + 1)..n {
                acc -= lhs[row * n + c] * x[c * m + j];
            }
            x[row * m + j] = acc / lhs[row * n + row];
        }
    }
    Ok(EmbeddingMatrix::from_raw(n, m, x))
}
