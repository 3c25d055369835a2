//! Dense symmetric positive definite linear algebra.
//!
//! Row-major storage throughout. Cholesky factors are computed with the row-oriented
//! (Banachiewicz) recurrence so every inner product runs over contiguous memory.

use std::ops::{Index, IndexMut};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, dot2x2, Real};
use crate::workspace::Buf;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Buf<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: Buf::zeros(rows * cols),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Wraps row-major data. Fails if the length does not match or an entry is not
    /// finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                format!("{} entries for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            data: Buf::from_vec(data),
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn column(values: &[T]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: Buf::from_slice(values),
        }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_buf(self) -> Buf<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dims(
                format!("{} rows", self.cols),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != T::zero() {
                    axpy(a, other.row(k), out.row_mut(i));
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    /// Largest `|a_ij - a_ji|`; infinite for non-square matrices.
    pub fn max_asymmetry(&self) -> T {
        if !self.is_square() {
            return T::infinity();
        }
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A + reg I`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor<T = f64> {
    lower: DenseMatrix<T>,
}

impl<T: Real> CholeskyFactor<T> {
    /// Factors in place, reading only the lower triangle of `a`. The strict upper
    /// triangle is zeroed.
    pub fn from_lower_in_place(mut a: DenseMatrix<T>, regularization: T) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims(
                "square matrix",
                format!("{}x{}", a.rows, a.cols),
            ));
        }
        factor_lower_in_place(a.rows, &mut a.data, regularization)?;
        Ok(CholeskyFactor { lower: a })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &DenseMatrix<T> {
        &self.lower
    }

    /// Solves `L L^T x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) -> Result<()> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::dims(n, b.len()));
        }
        let l = self.lower.as_slice();
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            b[i] = (b[i] - dot(row, &b[..i])) / l[i * n + i];
        }
        for i in (0..n).rev() {
            b[i] /= l[i * n + i];
            let xi = b[i];
            let row = &l[i * n..i * n + i];
            axpy(-xi, row, &mut b[..i]);
        }
        Ok(())
    }

    /// Solves `L L^T X = B` for a row-major `dim x k` right-hand side, in place.
    pub fn solve_matrix_in_place(&self, rhs: &mut DenseMatrix<T>) -> Result<()> {
        let n = self.dim();
        if rhs.rows != n {
            return Err(Error::dims(
                format!("{n} rows"),
                format!("{} rows", rhs.rows),
            ));
        }
        let k = rhs.cols;
        let l = self.lower.as_slice();
        let x = rhs.as_mut_slice();
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * k);
            let xi = &mut rest[..k];
            for j in 0..i {
                let lij = l[i * n + j];
                if lij != T::zero() {
                    axpy(-lij, &done[j * k..(j + 1) * k], xi);
                }
            }
            let inv = T::one() / l[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        for i in (0..n).rev() {
            let (head, rest) = x.split_at_mut(i * k);
            let xi = &mut rest[..k];
            let inv = T::one() / l[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
            for j in 0..i {
                let lij = l[i * n + j];
                if lij != T::zero() {
                    axpy(-lij, xi, &mut head[j * k..(j + 1) * k]);
                }
            }
        }
        Ok(())
    }
}

/// Row-oriented Cholesky of the lower triangle of an `n x n` row-major buffer.
pub(crate) fn factor_lower_in_place<T: Real>(
    n: usize,
    a: &mut [T],
    regularization: T,
) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for i in 0..n {
        let (prev, rest) = a.split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..i {
            let row_j = &prev[j * n..j * n + j];
            let s = row_i[j] - dot(&row_i[..j], row_j);
            row_i[j] = s / prev[j * n + j];
        }
        let d = row_i[i] + regularization - dot(&row_i[..i], &row_i[..i]);
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: i,
                value: d.as_f64(),
            });
        }
        row_i[i] = d.sqrt();
        row_i[i + 1..].iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(())
}

fn symmetry_tolerance<T: Real>() -> f64 {
    1e-8f64.max(16.0 * T::epsilon().as_f64())
}

/// Factors `a + regularization * I = L L^T`.
///
/// `a` must be square and symmetric to within `1e-8` relative to its largest entry.
pub fn cholesky_factorize<T: Real>(
    a: &DenseMatrix<T>,
    regularization: T,
) -> Result<CholeskyFactor<T>> {
    if !a.is_square() {
        return Err(Error::dims(
            "square matrix",
            format!("{}x{}", a.rows, a.cols),
        ));
    }
    if regularization < T::zero() || !regularization.is_finite() {
        return Err(Error::InvalidInput("regularization must be >= 0".into()));
    }
    let scale = a.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let asym = a.max_asymmetry();
    if asym.as_f64() > symmetry_tolerance::<T>() * scale.as_f64() {
        return Err(Error::NotSymmetric {
            asymmetry: asym.as_f64(),
        });
    }
    CholeskyFactor::from_lower_in_place(a.clone(), regularization)
}

/// Solves `(L L^T) W = rhs`.
pub fn cholesky_solve<T: Real>(
    factor: &CholeskyFactor<T>,
    rhs: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let mut out = rhs.clone();
    factor.solve_matrix_in_place(&mut out)?;
    Ok(out)
}

/// Factors each matrix independently. With `parallel`, elements are distributed over
/// the rayon pool; results are identical either way.
pub fn cholesky_factorize_batch<T: Real>(
    mats: &[DenseMatrix<T>],
    regularization: T,
    parallel: bool,
) -> Result<Vec<CholeskyFactor<T>>> {
    if parallel {
        mats.par_iter()
            .map(|a| cholesky_factorize(a, regularization))
            .collect()
    } else {
        mats.iter()
            .map(|a| cholesky_factorize(a, regularization))
            .collect()
    }
}

pub fn cholesky_solve_batch<T: Real>(
    factors: &[CholeskyFactor<T>],
    rhs: &[DenseMatrix<T>],
    parallel: bool,
) -> Result<Vec<DenseMatrix<T>>> {
    if factors.len() != rhs.len() {
        return Err(Error::dims(factors.len(), rhs.len()));
    }
    if parallel {
        factors
            .par_iter()
            .zip(rhs.par_iter())
            .map(|(f, b)| cholesky_solve(f, b))
            .collect()
    } else {
        factors
            .iter()
            .zip(rhs)
            .map(|(f, b)| cholesky_solve(f, b))
            .collect()
    }
}

/// Solves the diagonal-bordered system
///
/// ```text
/// [ diag(d1)  Q        ] [x1]   [a]
/// [ Q^T       diag(d2) ] [x2] = [b]
/// ```
///
/// with `Q` a row-major `p x q` block, by eliminating whichever diagonal block is
/// larger. Only a `min(p, q)` square Schur complement is factored. `regularization`
/// is added to the Schur complement's diagonal.
pub fn solve_bordered_diagonal<T: Real>(
    d1: &[T],
    q: &[T],
    d2: &[T],
    a: &[T],
    b: &[T],
    regularization: T,
) -> Result<(Buf<T>, Buf<T>)> {
    let (p, nq) = (d1.len(), d2.len());
    if q.len() != p * nq || a.len() != p || b.len() != nq {
        return Err(Error::dims(
            format!("Q {p}x{nq}, a {p}, b {nq}"),
            format!("Q {}, a {}, b {}", q.len(), a.len(), b.len()),
        ));
    }
    if p <= nq {
        solve_small_top(d1, q, d2, a, b, regularization)
    } else {
        solve_small_bottom(d1, q, d2, a, b, regularization)
    }
}

/// `p <= q`: factor `S = D1 - Q D2^-1 Q^T` (`p x p`).
fn solve_small_top<T: Real>(
    d1: &[T],
    q: &[T],
    d2: &[T],
    a: &[T],
    b: &[T],
    regularization: T,
) -> Result<(Buf<T>, Buf<T>)> {
    let (p, nq) = (d1.len(), d2.len());
    let inv_d2: Buf<T> = d2.iter().map(|&d| T::one() / d).collect();
    // `Q D2^-1/2`, so the Schur product reads a single matrix.
    let inv_sqrt: Buf<T> = inv_d2.iter().map(|&w| w.sqrt()).collect();
    let mut qd: Buf<T> = Buf::zeros(p * nq);
    for i in 0..p {
        let (src, dst) = (&q[i * nq..(i + 1) * nq], &mut qd[i * nq..(i + 1) * nq]);
        for ((o, &x), &w) in dst.iter_mut().zip(src).zip(inv_sqrt.iter()) {
            *o = x * w;
        }
    }
    let mut schur: Buf<T> = Buf::zeros(p * p);
    let row = |i: usize| i * nq..(i + 1) * nq;
    // Lower triangle in 2 x 2 tiles, grouped into cache blocks of rows. A tile on
    // the diagonal also writes one upper entry, which the factorisation ignores.
    const BLOCK: usize = 64;
    for ib in (0..p).step_by(BLOCK) {
        for kb in (0..=ib).step_by(BLOCK) {
            for i in (ib..(ib + BLOCK).min(p)).step_by(2) {
                let i1 = (i + 1).min(p - 1);
                for k in (kb..(kb + BLOCK).min(i + 1)).step_by(2) {
                    let k1 = (k + 1).min(p - 1);
                    let t = dot2x2(&qd[row(i)], &qd[row(i1)], &qd[row(k)], &qd[row(k1)]);
                    schur[i * p + k] = -t[0];
                    schur[i * p + k1] = -t[1];
                    schur[i1 * p + k] = -t[2];
                    schur[i1 * p + k1] = -t[3];
                }
            }
        }
    }
    for i in 0..p {
        schur[i * p + i] += d1[i];
    }
    factor_lower_in_place(p, &mut schur, regularization)?;
    let factor = CholeskyFactor::from_factored(p, schur);

    let bs: Buf<T> = b
        .iter()
        .zip(inv_sqrt.iter())
        .map(|(&x, &w)| x * w)
        .collect();
    let mut x1: Buf<T> = Buf::zeros(p);
    for i in 0..p {
        x1[i] = a[i] - dot(&qd[i * nq..(i + 1) * nq], &bs);
    }
    drop(qd);
    factor.solve_in_place(&mut x1)?;

    let mut x2 = Buf::from_slice(b);
    for i in 0..p {
        axpy(-x1[i], &q[i * nq..(i + 1) * nq], &mut x2);
    }
    for (x, &w) in x2.iter_mut().zip(inv_d2.iter()) {
        *x *= w;
    }
    Ok((x1, x2))
}

/// `p > q`: factor `S = D2 - Q^T D1^-1 Q` (`q x q`).
fn solve_small_bottom<T: Real>(
    d1: &[T],
    q: &[T],
    d2: &[T],
    a: &[T],
    b: &[T],
    regularization: T,
) -> Result<(Buf<T>, Buf<T>)> {
    let (p, nq) = (d1.len(), d2.len());
    let mut schur: Buf<T> = Buf::zeros(nq * nq);
    for j in 0..nq {
        schur[j * nq + j] = d2[j];
    }
    let mut rhs2 = Buf::from_slice(b);
    for i in 0..p {
        let qi = &q[i * nq..(i + 1) * nq];
        let w = T::one() / d1[i];
        for j in 0..nq {
            let c = -qi[j] * w;
            if c != T::zero() {
                axpy(c, &qi[..=j], &mut schur[j * nq..j * nq + j + 1]);
            }
        }
        axpy(-a[i] * w, qi, &mut rhs2);
    }
    factor_lower_in_place(nq, &mut schur, regularization)?;
    let factor = CholeskyFactor::from_factored(nq, schur);
    factor.solve_in_place(&mut rhs2)?;
    let x2 = rhs2;

    let x1: Buf<T> = (0..p)
        .map(|i| (a[i] - dot(&q[i * nq..(i + 1) * nq], &x2)) / d1[i])
        .collect();
    Ok((x1, x2))
}

impl<T: Real> CholeskyFactor<T> {
    pub(crate) fn from_factored(dim: usize, data: Buf<T>) -> Self {
        CholeskyFactor {
            lower: DenseMatrix {
                rows: dim,
                cols: dim,
                data,
            },
        }
    }
}
