//! Dense linear algebra for the small systems that appear in Newton layers,
//! Schur complements and spectral diagnostics.
//!
//! Everything here targets dimensions up to a few dozen: row-major storage,
//! LU with partial pivoting, Hessenberg + shifted QR for eigenvalues, and
//! inverse iteration for the smallest singular value.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use thiserror::Error;

/// Relative pivot threshold used by [`lu_factor`].
pub const PIVOT_REL_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is singular (pivot {pivot_index} below threshold)")]
    SingularMatrix { pivot_index: usize },
    #[error("eigenvalue iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "DenseMatrix::from_vec: length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "DenseMatrix::from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Infinity operator norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Spectral norm, from the largest eigenvalue of `MᵀM`.
    pub fn norm2(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let gram = self.transpose().matmul(self);
        let eigs = symmetric_eigenvalues(&gram);
        eigs.into_iter().fold(0.0, f64::max).max(0.0).sqrt()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec: dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Mᵀ x` without forming the transpose.
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tmatvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * xr;
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul: dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> DenseMatrix {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Submatrix formed by the given row and column index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> DenseMatrix {
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(rows[i], cols[j])])
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &DenseMatrix) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> DenseMatrix {
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn hstack(blocks: &[&DenseMatrix]) -> DenseMatrix {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut c0 = 0;
        for b in blocks {
            assert_eq!(b.rows, rows, "hstack: row mismatch");
            out.set_block(0, c0, b);
            c0 += b.cols;
        }
        out
    }

    pub fn vstack(blocks: &[&DenseMatrix]) -> DenseMatrix {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut r0 = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack: column mismatch");
            out.set_block(r0, 0, b);
            r0 += b.rows;
        }
        out
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Packed LU factors of a square matrix with a row permutation (`PA = LU`).
#[derive(Debug, Clone)]
pub struct LuFactorization {
    lu: DenseMatrix,
    perm: Vec<usize>,
    sign: f64,
}

/// Factors `m` with partial pivoting.
///
/// A pivot whose magnitude falls below `1e-14 · max|m_ij|` is reported as
/// [`LinalgError::SingularMatrix`].
pub fn lu_factor(m: &DenseMatrix) -> Result<LuFactorization, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.rows, cols: m.cols });
    }
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = m.rows;
    let mut lu = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    let threshold = PIVOT_REL_TOL * m.max_abs();

    for k in 0..n {
        let mut p = k;
        let mut best = lu[(k, k)].abs();
        for i in k + 1..n {
            let v = lu[(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best <= threshold || best == 0.0 {
            return Err(LinalgError::SingularMatrix { pivot_index: k });
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            if factor != 0.0 {
                for j in k + 1..n {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= factor * u;
                }
            }
        }
    }
    Ok(LuFactorization { lu, perm, sign })
}

impl LuFactorization {
    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Diagonal of `U`.
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.lu[(i, i)]).collect()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "LU solve: dimension mismatch");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let s: f64 = row[..i].iter().zip(&x[..i]).map(|(l, xv)| l * xv).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s: f64 = row[i + 1..].iter().zip(&x[i + 1..]).map(|(u, xv)| u * xv).sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// Solves `Aᵀ x = b` with the same factors.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "LU solve_transpose: dimension mismatch");
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, Lᵀ v = w, x = Pᵀ v.
        let mut w = b.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for k in 0..i {
                s -= self.lu[(k, i)] * w[k];
            }
            w[i] = s / self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = w[i];
            for k in i + 1..n {
                s -= self.lu[(k, i)] * w[k];
            }
            w[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(b.rows, b.cols);
        for c in 0..b.cols {
            let col = self.solve(&b.column(c));
            out.set_column(c, &col);
        }
        out
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.dim()).map(|i| self.lu[(i, i)]).product::<f64>()
    }

    /// `ln|det A|`, useful when the determinant itself would under/overflow.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.lu[(i, i)].abs().ln()).sum()
    }

    pub fn inverse(&self) -> DenseMatrix {
        self.solve_matrix(&DenseMatrix::identity(self.dim()))
    }
}

/// Solves `m x = b` in one call.
pub fn solve(m: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    Ok(lu_factor(m)?.solve(b))
}

/// Determinant through LU; a singular factorization yields `0.0`.
pub fn det(m: &DenseMatrix) -> Result<f64, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.rows, cols: m.cols });
    }
    if m.rows == 0 {
        return Ok(1.0);
    }
    match lu_factor(m) {
        Ok(lu) => Ok(lu.det()),
        Err(LinalgError::SingularMatrix { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Eigenvalues of a real square matrix, via Householder reduction to upper
/// Hessenberg form followed by Francis double-shift QR. Complex conjugate
/// pairs come out of 2×2 diagonal blocks.
pub fn eigenvalues(m: &DenseMatrix) -> Result<Vec<Complex64>, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.rows, cols: m.cols });
    }
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = m.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = m.clone();
    hessenberg_reduce(&mut h);
    let (re, im) = hessenberg_qr(&mut h)?;
    Ok(re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect())
}

fn hessenberg_reduce(h: &mut DenseMatrix) {
    let n = h.rows;
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;

        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hh;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hh;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
        for i in m + 1..=high {
            h[(i, m - 1)] = 0.0;
        }
    }
}

/// Shifted QR on an upper Hessenberg matrix (eigenvalues only).
fn hessenberg_qr(h: &mut DenseMatrix) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    let nn = h.rows;
    let mut d = vec![0.0; nn];
    let mut e = vec![0.0; nn];
    let eps = f64::EPSILON;
    let low = 0usize;
    let mut exshift = 0.0;
    let max_sweeps = 100 * nn;
    let mut sweeps = 0usize;

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let mut n = nn as isize - 1;
    let mut iter = 0;
    while n >= low as isize {
        let nu = n as usize;
        // Look for a single small sub-diagonal element.
        let mut l = nu;
        while l > low {
            let mut s = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l, l - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == nu {
            d[nu] = h[(nu, nu)] + exshift;
            e[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l + 1 == nu {
            let w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            let p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            let q = p * p + w;
            let z = q.abs().sqrt();
            let x = h[(nu, nu)] + exshift;
            if q >= 0.0 {
                let z = if p >= 0.0 { p + z } else { p - z };
                d[nu - 1] = x + z;
                d[nu] = if z != 0.0 { x - w / z } else { d[nu - 1] };
                e[nu - 1] = 0.0;
                e[nu] = 0.0;
            } else {
                d[nu - 1] = x + p;
                d[nu] = x + p;
                e[nu - 1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            sweeps += 1;
            if sweeps > max_sweeps {
                return Err(LinalgError::NoConvergence { sweeps: max_sweeps });
            }
            let mut x = h[(nu, nu)];
            let mut y = h[(nu - 1, nu - 1)];
            let mut w = h[(nu, nu - 1)] * h[(nu - 1, nu)];

            if iter == 10 {
                exshift += x;
                for i in low..=nu {
                    h[(i, i)] -= x;
                }
                let s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                let mut s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            // Look for two consecutive small sub-diagonal elements.
            let mut m = nu - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = h[(m, m)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / h[(m + 1, m)] + h[(m, m + 1)];
                q = h[(m + 1, m + 1)] - z - rr - ss;
                r = h[(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                h[(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // Double QR step on rows l..=n and columns m..=n.
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                let mut xk = 0.0;
                if k != m {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    xk = p.abs() + q.abs() + r.abs();
                    if xk == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= xk;
                    q /= xk;
                    r /= xk;
                }
                let mut s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(k, k - 1)] = -s * xk;
                    } else if l != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                    p += s;
                    let xx = p / s;
                    let yy = q / s;
                    let zz = r / s;
                    q /= p;
                    r /= p;

                    for j in k..nn {
                        let mut pp = h[(k, j)] + q * h[(k + 1, j)];
                        if notlast {
                            pp += r * h[(k + 2, j)];
                            h[(k + 2, j)] -= pp * zz;
                        }
                        h[(k, j)] -= pp * xx;
                        h[(k + 1, j)] -= pp * yy;
                    }
                    let upper = nu.min(k + 3);
                    for i in 0..=upper {
                        let mut pp = xx * h[(i, k)] + yy * h[(i, k + 1)];
                        if notlast {
                            pp += zz * h[(i, k + 2)];
                            h[(i, k + 2)] -= pp * r;
                        }
                        h[(i, k)] -= pp;
                        h[(i, k + 1)] -= pp * q;
                    }
                }
                k += 1;
            }
        }
    }
    Ok((d, e))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows;
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eigs.sort_by(|x, y| x.total_cmp(y));
    eigs
}

/// Smallest singular value by inverse power iteration on `MᵀM`, reusing one
/// LU factorization of `M`. A singular factorization returns `0.0`.
pub fn min_singular_value(m: &DenseMatrix) -> Result<f64, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.rows, cols: m.cols });
    }
    let n = m.rows;
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let lu = match lu_factor(m) {
        Ok(lu) => lu,
        Err(LinalgError::SingularMatrix { .. }) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    // Deterministic start with components in every direction.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sin()).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);

    let mut lambda_prev = 0.0;
    for _ in 0..20_000 {
        // y = M⁻ᵀ x, so xᵀ (MᵀM)⁻¹ x = ‖y‖².
        let y = lu.solve_transpose(&x);
        let lambda = dot(&y, &y);
        let mut next = lu.solve(&y);
        let nn = norm2(&next);
        if !nn.is_finite() || nn == 0.0 {
            return Ok(0.0);
        }
        next.iter_mut().for_each(|v| *v /= nn);
        x = next;
        if (lambda - lambda_prev).abs() <= 1e-15 * lambda {
            return Ok(1.0 / lambda.sqrt());
        }
        lambda_prev = lambda;
    }
    Ok(1.0 / lambda_prev.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(mut v: Vec<Complex64>) -> Vec<Complex64> {
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }

    #[test]
    fn identity_lu_has_unit_pivots_and_identity_permutation() {
        let lu = lu_factor(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(lu.pivots(), vec![1.0, 1.0, 1.0]);
        assert_eq!(lu.permutation(), &[0, 1, 2]);
    }

    #[test]
    fn permutation_matrix_swaps_rows() {
        let m = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let lu = lu_factor(&m).unwrap();
        assert_eq!(lu.permutation(), &[1, 0]);
        assert_eq!(lu.solve(&[1.0, 2.0]), vec![2.0, 1.0]);
        assert_eq!(lu.det(), -1.0);
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(lu_factor(&m).unwrap_err(), LinalgError::SingularMatrix { pivot_index: 1 });
        assert_eq!(det(&m).unwrap(), 0.0);
        assert_eq!(min_singular_value(&m).unwrap(), 0.0);
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        let m = DenseMatrix::from_rows(&[&[4.0, 1.0, 0.5], &[-2.0, 3.0, 1.0], &[0.3, -1.0, 5.0]]);
        let lu = lu_factor(&m).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = lu.solve_transpose(&b);
        let expect = lu_factor(&m.transpose()).unwrap().solve(&b);
        for (a, e) in x.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_and_rotation_eigenvalues() {
        let e = sorted(eigenvalues(&DenseMatrix::from_diag(&[-1.0, -2.0])).unwrap());
        assert!((e[0].re + 2.0).abs() < 1e-14 && (e[1].re + 1.0).abs() < 1e-14);

        let rot = DenseMatrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let e = sorted(eigenvalues(&rot).unwrap());
        assert!(e[0].re.abs() < 1e-14 && (e[0].im + 1.0).abs() < 1e-14);
        assert!(e[1].re.abs() < 1e-14 && (e[1].im - 1.0).abs() < 1e-14);
    }

    #[test]
    fn companion_matrix_roots() {
        // λ² + 3λ + 2 = (λ + 1)(λ + 2)
        let c = DenseMatrix::from_rows(&[&[0.0, 1.0], &[-2.0, -3.0]]);
        let e = sorted(eigenvalues(&c).unwrap());
        assert!((e[0].re + 2.0).abs() < 1e-12 && e[0].im == 0.0);
        assert!((e[1].re + 1.0).abs() < 1e-12 && e[1].im == 0.0);
    }

    #[test]
    fn larger_companion_matrix() {
        // (λ+1)(λ+2)(λ+3)(λ+4)(λ+5) = λ⁵ + 15λ⁴ + 85λ³ + 225λ² + 274λ + 120
        let coeffs = [120.0, 274.0, 225.0, 85.0, 15.0];
        let mut c = DenseMatrix::zeros(5, 5);
        for i in 0..4 {
            c[(i, i + 1)] = 1.0;
        }
        for j in 0..5 {
            c[(4, j)] = -coeffs[j];
        }
        let e = sorted(eigenvalues(&c).unwrap());
        for (k, ev) in e.iter().enumerate() {
            assert!((ev.re + (5 - k) as f64).abs() < 1e-8, "{ev:?}");
            assert!(ev.im.abs() < 1e-8);
        }
    }

    #[test]
    fn min_singular_value_simple_cases() {
        assert!((min_singular_value(&DenseMatrix::identity(4)).unwrap() - 1.0).abs() < 1e-14);
        let d = DenseMatrix::from_diag(&[3.0, 0.5]);
        assert!((min_singular_value(&d).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn norm2_of_diagonal() {
        let d = DenseMatrix::from_diag(&[-3.0, 0.5, 2.0]);
        assert!((d.norm2() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn det_of_2x2_matches_ad_minus_bc() {
        let m = DenseMatrix::from_rows(&[&[3.0, 7.0], &[1.5, -2.0]]);
        let expect = 3.0 * -2.0 - 7.0 * 1.5;
        assert!((det(&m).unwrap() - expect).abs() <= 1e-12 * expect.abs());
    }
}
