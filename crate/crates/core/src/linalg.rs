//! Small dense real linear algebra.
//!
//! Everything here works on row-major `f64` storage and is sized for the
//! problems this crate deals with (a few thousand rows, at most a few hundred
//! columns). Symmetric eigenvalues come from Householder tridiagonalization
//! followed by implicit QL, which is robust for the dimensions involved.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::invalid(format!(
                "row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Matrix::from_row_major(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero, and a zero-column matrix still has rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Rows `range` as a new matrix.
    pub fn row_block(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(Error::invalid("vstack blocks differ in column count"));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let data = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
        Ok(Matrix { rows, cols, data })
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self + s·I` for square matrices.
    pub fn add_diagonal(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += s;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise distance from symmetry, `max |S - Sᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.row_iter() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn vec_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn frob_norm(m: &Matrix) -> f64 {
    vec_norm(m.as_slice())
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols() != v.len() {
        return Err(Error::invalid(format!(
            "cannot multiply {}x{} matrix by vector of length {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    Ok(m.row_iter().map(|r| dot(r, v)).collect())
}

/// `Mᵀ·v`
pub fn matvec_t(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.rows() != v.len() {
        return Err(Error::invalid(format!(
            "cannot multiply transpose of {}x{} matrix by vector of length {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    let mut out = vec![0.0; m.cols()];
    for (r, &vi) in m.row_iter().zip(v) {
        axpy(vi, r, &mut out);
    }
    Ok(out)
}

/// `AᵀA`, accumulated as a sum of row outer products and mirrored so the
/// result is exactly symmetric.
pub fn gram(a: &Matrix) -> Matrix {
    let d = a.cols();
    let mut g = Matrix::zeros(d, d);
    for r in a.row_iter() {
        for (i, &ri) in r.iter().enumerate() {
            if ri == 0.0 {
                continue;
            }
            let row = &mut g.row_mut(i)[i..];
            axpy(ri, &r[i..], row);
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, ordered like `values`.
    pub vectors: Option<Matrix>,
}

/// Eigenvalues (ascending) of a symmetric matrix; only the upper triangle is
/// trusted to match the lower one, no check is made here.
pub fn sym_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    Ok(sym_eigen_impl(s, false)?.values)
}

/// Eigenvalues and eigenvectors of a symmetric matrix.
pub fn sym_eigen(s: &Matrix) -> Result<SymEigen> {
    sym_eigen_impl(s, true)
}

fn sym_eigen_impl(s: &Matrix, want_vectors: bool) -> Result<SymEigen> {
    if !s.is_square() {
        return Err(Error::invalid(format!(
            "eigenvalues need a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let n = s.rows();
    if n == 0 {
        return Ok(SymEigen {
            values: vec![],
            vectors: want_vectors.then(|| Matrix::zeros(0, 0)),
        });
    }
    if !s.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let mut v = s.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    implicit_ql(&mut v, &mut d, &mut e, want_vectors)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = want_vectors.then(|| {
        let mut sorted = Matrix::zeros(n, n);
        for (new_j, &old_j) in order.iter().enumerate() {
            for i in 0..n {
                sorted[(i, new_j)] = v[(i, old_j)];
            }
        }
        sorted
    });
    Ok(SymEigen { values, vectors })
}

// Householder reduction to tridiagonal form (EISPACK tred2 as in JAMA).
// On return `d` holds the diagonal, `e[1..]` the sub-diagonal, `v` the
// accumulated orthogonal transform.
fn tridiagonalize(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

const QL_MAX_ITER: usize = 60;

// Implicit QL with Wilkinson-style shifts on the tridiagonal (EISPACK tql2).
fn implicit_ql(v: &mut Matrix, d: &mut [f64], e: &mut [f64], want_vectors: bool) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITER {
                    return Err(Error::numerical(format!(
                        "symmetric eigensolver did not converge for eigenvalue {l}"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    if want_vectors {
                        for k in 0..n {
                            h = v[(k, i + 1)];
                            v[(k, i + 1)] = s * v[(k, i)] + c * h;
                            v[(k, i)] = c * v[(k, i)] - s * h;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Largest and smallest eigenvalue `(s1, sd)` of a symmetric positive
/// semi-definite matrix.
///
/// `tol` is relative to the largest entry magnitude and bounds both the
/// accepted asymmetry and how far below zero `sd` may fall.
pub fn sym_extreme_eigs(s: &Matrix, tol: f64) -> Result<(f64, f64)> {
    if !s.is_square() || s.rows() == 0 {
        return Err(Error::invalid(format!(
            "extreme eigenvalues need a non-empty square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let scale = s.max_abs().max(f64::MIN_POSITIVE);
    let asym = s.asymmetry();
    if asym > tol * scale {
        return Err(Error::invalid(format!(
            "matrix is not symmetric: max |S - S^T| = {asym:e}"
        )));
    }
    let vals = sym_eigenvalues(s)?;
    let (sd, s1) = (vals[0], vals[vals.len() - 1]);
    let floor = tol * scale * s.rows() as f64;
    if sd < -floor {
        return Err(Error::invalid(format!(
            "matrix is not positive semi-definite: smallest eigenvalue {sd:e}"
        )));
    }
    Ok((s1, sd.max(-floor)))
}

/// Induced 2-norm, the square root of the largest eigenvalue of `MᵀM` (or
/// `MMᵀ`, whichever is smaller).
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0.0);
    }
    let g = if m.rows() >= m.cols() {
        gram(m)
    } else {
        gram(&m.transpose())
    };
    let vals = sym_eigenvalues(&g)?;
    Ok(vals[vals.len() - 1].max(0.0).sqrt())
}

/// Spectral norm of a symmetric matrix, `max |λ|`, without squaring it.
pub fn sym_spectral_norm(s: &Matrix) -> Result<f64> {
    let vals = sym_eigenvalues(s)?;
    Ok(vals.first().map_or(0.0, |lo| lo.abs().max(vals[vals.len() - 1].abs())))
}

/// Cholesky factor `L` with `S = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(s: &Matrix) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::invalid(format!(
                "Cholesky needs a square matrix, got {}x{}",
                s.rows(),
                s.cols()
            )));
        }
        let n = s.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = s[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::numerical(format!(
                    "matrix is not positive definite (pivot {j} = {diag:e})"
                )));
            }
            diag = diag.sqrt();
            l[(j, j)] = diag;
            for i in (j + 1)..n {
                let v = s[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = v / diag;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.l.rows();
        if b.len() != n {
            return Err(Error::invalid(format!(
                "right-hand side has length {}, expected {n}",
                b.len()
            )));
        }
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        Ok(y)
    }

    /// Smallest pivot squared; a cheap lower-confidence sign of conditioning.
    pub fn min_pivot(&self) -> f64 {
        self.l
            .diagonal()
            .into_iter()
            .fold(f64::INFINITY, |m, v| m.min(v * v))
    }
}

/// Solves `S·X = RHS` for symmetric positive definite `S`.
pub fn solve_spd(s: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if rhs.rows() != s.rows() {
        return Err(Error::invalid(format!(
            "right-hand side has {} rows, expected {}",
            rhs.rows(),
            s.rows()
        )));
    }
    let chol = Cholesky::new(s)?;
    let mut x = Matrix::zeros(rhs.rows(), rhs.cols());
    for j in 0..rhs.cols() {
        let col = chol.solve_vec(&rhs.column(j))?;
        for (i, v) in col.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    Ok(x)
}
