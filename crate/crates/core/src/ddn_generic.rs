//! Generic implicit differentiation of
//!
//! ```text
//! y(x) = argmin_u f(x, u)   s.t.  h(x, u) = 0
//! ```
//!
//! from black-box evaluators of `f` and `h`. Every derivative block is estimated by
//! central differences, so this is slow and only as accurate as the differencing;
//! it exists to cross-check the structured backward passes on small instances.
//!
//! With `A = D_u h`, `C = D_x h`, `lambda^T A = D_u f`, `L = f - lambda^T h`,
//! `B = D_xu L` and `H = D_uu L`:
//!
//! ```text
//! Dy = H^-1 A^T (A H^-1 A^T)^-1 (A H^-1 B - C) - H^-1 B
//! ```
//!
//! `H` must be positive definite on all of `R^m`, not only on the tangent space of
//! the constraints.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

type Objective<'a> = Box<dyn Fn(&[f64], &[f64]) -> f64 + 'a>;
type Constraints<'a> = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + 'a>;

/// Objective `f(x, u)` and equality constraints `h(x, u) = 0` of a node with
/// `n_in` inputs and `m_out` outputs.
pub struct NodeSpec<'a> {
    pub n_in: usize,
    pub m_out: usize,
    pub p_constraints: usize,
    pub objective: Objective<'a>,
    pub constraints: Constraints<'a>,
}

impl<'a> NodeSpec<'a> {
    pub fn unconstrained(
        n_in: usize,
        m_out: usize,
        objective: impl Fn(&[f64], &[f64]) -> f64 + 'a,
    ) -> Self {
        NodeSpec {
            n_in,
            m_out,
            p_constraints: 0,
            objective: Box::new(objective),
            constraints: Box::new(|_, _| Vec::new()),
        }
    }

    pub fn constrained(
        n_in: usize,
        m_out: usize,
        p_constraints: usize,
        objective: impl Fn(&[f64], &[f64]) -> f64 + 'a,
        constraints: impl Fn(&[f64], &[f64]) -> Vec<f64> + 'a,
    ) -> Self {
        NodeSpec {
            n_in,
            m_out,
            p_constraints,
            objective: Box::new(objective),
            constraints: Box::new(constraints),
        }
    }

    fn h(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let v = (self.constraints)(x, u);
        if v.len() != self.p_constraints {
            return Err(Error::dims(
                format!("{} constraint values", self.p_constraints),
                v.len(),
            ));
        }
        Ok(v)
    }
}

impl std::fmt::Debug for NodeSpec<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeSpec")
            .field("n_in", &self.n_in)
            .field("m_out", &self.m_out)
            .field("p_constraints", &self.p_constraints)
            .finish_non_exhaustive()
    }
}

/// Relative difference steps; the step for coordinate `z` is `step * max(1, |z|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSteps {
    pub first: f64,
    pub second: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        FdSteps {
            first: 1e-5,
            second: 1e-4,
        }
    }
}

/// Derivative blocks at `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Eq3Workspace {
    /// `p x m`
    pub a: DenseMatrix,
    /// `m x n`
    pub b: DenseMatrix,
    /// `p x n`
    pub c: DenseMatrix,
    /// `m x m`, symmetrised.
    pub h: DenseMatrix,
    pub lambda: Vec<f64>,
    /// `|D_u f - lambda^T A|_2`
    pub stationarity_residual: f64,
}

fn step(rel: f64, z: f64) -> f64 {
    rel * z.abs().max(1.0)
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] = m[(i, j)];
        }
    }
    out
}

/// Mixed second difference of `g` in coordinates `i` of `s` and `j` of `t`, where
/// `s` and `t` may be the same vector (`same`).
fn second_difference(
    g: &dyn Fn(&[f64], &[f64]) -> f64,
    x: &[f64],
    u: &[f64],
    first_in_x: bool,
    i: usize,
    j: usize,
    si: f64,
    sj: f64,
) -> f64 {
    let mut xs = x.to_vec();
    let mut us = u.to_vec();
    let mut eval = |di: f64, dj: f64| {
        xs.copy_from_slice(x);
        us.copy_from_slice(u);
        if first_in_x {
            xs[i] += di;
        } else {
            us[i] += di;
        }
        us[j] += dj;
        g(&xs, &us)
    };
    let pp = eval(si, sj);
    let pm = eval(si, -sj);
    let mp = eval(-si, sj);
    let mm = eval(-si, -sj);
    (pp - pm - mp + mm) / (4.0 * si * sj)
}

/// Estimates `A, B, C, H` and `lambda` at a stationary point `y` of the node at `x`.
///
/// Logs a warning when the stationarity residual exceeds `1e-6`, since the result
/// is only meaningful at an optimum.
pub fn assemble_derivatives(
    spec: &NodeSpec<'_>,
    x: &[f64],
    y: &[f64],
    steps: FdSteps,
) -> Result<Eq3Workspace> {
    let (n, m, p) = (spec.n_in, spec.m_out, spec.p_constraints);
    if x.len() != n || y.len() != m {
        return Err(Error::dims(
            format!("x {n}, y {m}"),
            format!("x {}, y {}", x.len(), y.len()),
        ));
    }
    if p >= m {
        return Err(Error::InvalidInput(format!(
            "need fewer constraints than outputs, got p = {p}, m = {m}"
        )));
    }
    if !(steps.first > 0.0 && steps.second > 0.0) {
        return Err(Error::InvalidInput(
            "difference steps must be positive".into(),
        ));
    }

    // First-order blocks.
    let mut grad_f = DVector::zeros(m);
    let mut a = DMatrix::zeros(p, m);
    let mut u = y.to_vec();
    for j in 0..m {
        let s = step(steps.first, y[j]);
        u[j] = y[j] + s;
        let (fp, hp) = ((spec.objective)(x, &u), spec.h(x, &u)?);
        u[j] = y[j] - s;
        let (fm, hm) = ((spec.objective)(x, &u), spec.h(x, &u)?);
        u[j] = y[j];
        grad_f[j] = (fp - fm) / (2.0 * s);
        for k in 0..p {
            a[(k, j)] = (hp[k] - hm[k]) / (2.0 * s);
        }
    }
    let mut c = DMatrix::zeros(p, n);
    let mut xs = x.to_vec();
    for j in 0..n {
        let s = step(steps.first, x[j]);
        xs[j] = x[j] + s;
        let hp = spec.h(&xs, y)?;
        xs[j] = x[j] - s;
        let hm = spec.h(&xs, y)?;
        xs[j] = x[j];
        for k in 0..p {
            c[(k, j)] = (hp[k] - hm[k]) / (2.0 * s);
        }
    }

    let lambda = if p == 0 {
        DVector::zeros(0)
    } else {
        let svd = a.transpose().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin >= 1e-8 * smax) || smax == 0.0 {
            return Err(Error::RankDeficientA {
                ratio: if smax > 0.0 { smin / smax } else { 0.0 },
            });
        }
        svd.solve(&grad_f, 0.0)
            .map_err(|e| Error::InvalidInput(e.into()))?
    };
    let stationarity_residual = (&grad_f - a.transpose() * &lambda).norm();
    if stationarity_residual > 1e-6 {
        warn!(
            "stationarity residual {stationarity_residual:.3e} exceeds 1e-6; y may not be optimal"
        );
    }

    // Second-order blocks of the Lagrangian.
    let lam: Vec<f64> = lambda.iter().copied().collect();
    let lagrangian = |xv: &[f64], uv: &[f64]| -> f64 {
        let h = (spec.constraints)(xv, uv);
        (spec.objective)(xv, uv) - h.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut h = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = second_difference(
                &lagrangian,
                x,
                y,
                false,
                i,
                j,
                step(steps.second, y[i]),
                step(steps.second, y[j]),
            );
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let mut b = DMatrix::zeros(m, n);
    for i in 0..n {
        for j in 0..m {
            b[(j, i)] = second_difference(
                &lagrangian,
                x,
                y,
                true,
                i,
                j,
                step(steps.second, x[i]),
                step(steps.second, y[j]),
            );
        }
    }

    Ok(Eq3Workspace {
        a: from_na(&a),
        b: from_na(&b),
        c: from_na(&c),
        h: from_na(&h),
        lambda: lam,
        stationarity_residual,
    })
}

fn cholesky(h: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    h.clone().cholesky().ok_or_else(|| {
        let eig = h.clone().symmetric_eigen();
        let (pivot, value) =
            eig.eigenvalues
                .iter()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
                );
        Error::NotPositiveDefinite { pivot, value }
    })
}

/// `Dy` (`m x n`) from the assembled blocks.
pub fn dy_dx_eq3(ws: &Eq3Workspace) -> Result<DenseMatrix> {
    let (h, a, b, c) = (to_na(&ws.h), to_na(&ws.a), to_na(&ws.b), to_na(&ws.c));
    let m = h.nrows();
    if !h.is_square()
        || b.nrows() != m
        || a.ncols() != m
        || a.nrows() != c.nrows()
        || b.ncols() != c.ncols()
    {
        return Err(Error::dims(
            "H m x m, A p x m, B m x n, C p x n",
            format!(
                "H {}x{}, A {}x{}, B {}x{}, C {}x{}",
                h.nrows(),
                h.ncols(),
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            ),
        ));
    }
    let hc = cholesky(&h)?;
    let hinv_b = hc.solve(&b);
    if a.nrows() == 0 {
        return Ok(from_na(&(-hinv_b)));
    }
    let hinv_at = hc.solve(&a.transpose());
    let s = &a * &hinv_at;
    let sc = cholesky(&s)?;
    let rhs = &a * &hinv_b - &c;
    let dy = hinv_at * sc.solve(&rhs) - hinv_b;
    Ok(from_na(&dy))
}

/// `-H^-1 B`.
pub fn dy_dx_unconstrained(h: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if !h.is_square() || b.rows() != h.rows() {
        return Err(Error::dims(
            format!("H square, B with {} rows", h.rows()),
            format!("H {}x{}, B {}x{}", h.rows(), h.cols(), b.rows(), b.cols()),
        ));
    }
    let hc = cholesky(&to_na(h))?;
    Ok(from_na(&(-hc.solve(&to_na(b)))))
}
