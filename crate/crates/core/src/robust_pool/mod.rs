//! Robust vector pooling.
//!
//! Forward: `y = argmin_u sum_i phi(|u - x_i|; alpha)` for each batch element.
//! Backward: with `v = dJ/dy`, solve `H w = v` once by Cholesky, where
//! `H = sum_i kappa1(z_i) I + kappa2(z_i) d_i d_i^T` and `d_i = y - x_i`, then
//!
//! ```text
//! dJ/dx_i = kappa1(z_i) w + kappa2(z_i) (w . d_i) d_i
//! ```
//!
//! Taking the inner product `w . d_i` before the outer product keeps the workspace at
//! `O(n m)` per batch element. When every `kappa2(z_i)` is zero, `H` is a multiple of
//! the identity and no factorisation is needed.

mod lbfgs;

pub use lbfgs::{lbfgs_minimize, LbfgsOptions, LbfgsOutcome};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{factor_lower_in_place, CholeskyFactor, DenseMatrix};
use crate::penalties::{PenaltyFamily, PenaltyKind};
use crate::scalar::{axpy, dot, Real};
use crate::workspace::Buf;

/// Norm shift used by the backward pass so that `kappa` is never evaluated at an
/// exact zero distance.
pub const BACKWARD_NORM_EPS: f64 = 1.0e-9;

/// `b` batches of `n` points in `R^m`, stored as `b x m x n` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet<T = f64> {
    batch: usize,
    dim: usize,
    points: usize,
    data: Buf<T>,
}

impl<T: Real> PointSet<T> {
    pub fn new(batch: usize, dim: usize, points: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || points == 0 {
            return Err(Error::InvalidInput(
                "point sets need m >= 1 and n >= 1".into(),
            ));
        }
        if data.len() != batch * dim * points {
            return Err(Error::dims(
                format!("{batch}x{dim}x{points}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(PointSet {
            batch,
            dim,
            points,
            data: Buf::from_vec(data),
        })
    }

    /// Builds a single-batch set from a list of points.
    pub fn from_points(points: &[Vec<T>]) -> Result<Self> {
        let n = points.len();
        let m = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != m) {
            return Err(Error::InvalidInput("points of unequal dimension".into()));
        }
        let mut data = vec![T::zero(); m * n];
        for (i, p) in points.iter().enumerate() {
            for (k, &c) in p.iter().enumerate() {
                data[k * n + i] = c;
            }
        }
        Self::new(1, m, n, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// The `m x n` block of batch element `b`.
    pub fn element(&self, b: usize) -> &[T] {
        let len = self.dim * self.points;
        &self.data[b * len..(b + 1) * len]
    }

    /// Coordinate `k` of point `i` in batch `b`.
    pub fn coord(&self, b: usize, k: usize, i: usize) -> T {
        self.data[(b * self.dim + k) * self.points + i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolOptions {
    /// Per-point gradient tolerance; the solver stops once `|grad f| <= tol * n`.
    pub tol: f64,
    pub max_iter: usize,
    pub history: usize,
    pub parallel: bool,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions {
            tol: 1e-10,
            max_iter: 500,
            history: 10,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolResult<T = f64> {
    /// Pooled output, `b x m`.
    pub y: Buf<T>,
    pub objective: Vec<T>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolBackwardOptions {
    /// Added to the diagonal of `H` before factorisation.
    pub regularization: f64,
    pub parallel: bool,
    /// Use the diagonal-Hessian shortcut when every `kappa2` vanishes.
    pub fast_path: bool,
}

impl Default for PoolBackwardOptions {
    fn default() -> Self {
        PoolBackwardOptions {
            regularization: 0.0,
            parallel: false,
            fast_path: true,
        }
    }
}

/// Objective and gradient at `u` for one batch element.
///
/// `resid` (`m x n`) and `z` (`n`) are scratch space. The gradient at a coincident
/// point uses the analytic `kappa1` limit.
pub fn pool_objective<T: Real>(
    xb: &[T],
    dim: usize,
    kind: &PenaltyKind,
    u: &[T],
    grad: &mut [T],
    resid: &mut [T],
    z: &mut [T],
) -> T {
    let n = xb.len() / dim;
    for k in 0..dim {
        let (xr, rr) = (&xb[k * n..(k + 1) * n], &mut resid[k * n..(k + 1) * n]);
        for (r, &x) in rr.iter_mut().zip(xr) {
            *r = u[k] - x;
        }
    }
    z.iter_mut().for_each(|v| *v = T::zero());
    for k in 0..dim {
        for (zi, &r) in z.iter_mut().zip(&resid[k * n..(k + 1) * n]) {
            *zi += r * r;
        }
    }
    let mut value = T::zero();
    for zi in z.iter_mut() {
        let dist = zi.sqrt();
        value += kind.phi(dist);
        *zi = kind.kappa(dist).kappa1;
    }
    for k in 0..dim {
        grad[k] = dot(&resid[k * n..(k + 1) * n], z);
    }
    value
}

fn sample_mean<T: Real>(xb: &[T], dim: usize, n: usize) -> Buf<T> {
    let inv = T::one() / T::count(n);
    (0..dim)
        .map(|k| xb[k * n..(k + 1) * n].iter().fold(T::zero(), |s, &v| s + v) * inv)
        .collect()
}

fn coordinate_median<T: Real>(xb: &[T], dim: usize, n: usize) -> Buf<T> {
    let mut scratch: Buf<T> = Buf::zeros(n);
    let mut out: Buf<T> = Buf::zeros(dim);
    for k in 0..dim {
        scratch.copy_from_slice(&xb[k * n..(k + 1) * n]);
        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
        out[k] = if n % 2 == 1 {
            scratch[n / 2]
        } else {
            (scratch[n / 2 - 1] + scratch[n / 2]) * T::lit(0.5)
        };
    }
    out
}

struct ElementSolution<T> {
    y: Buf<T>,
    objective: T,
    converged: bool,
    iterations: usize,
}

fn forward_element<T: Real>(
    xb: &[T],
    dim: usize,
    kind: &PenaltyKind,
    opts: &PoolOptions,
) -> ElementSolution<T> {
    let n = xb.len() / dim;
    let mut resid: Buf<T> = Buf::zeros(dim * n);
    let mut z: Buf<T> = Buf::zeros(n);
    let threshold = opts.tol * n as f64;

    if kind.family() == PenaltyFamily::Quadratic {
        let y = sample_mean(xb, dim, n);
        let mut g: Buf<T> = Buf::zeros(dim);
        let objective = pool_objective(xb, dim, kind, &y, &mut g, &mut resid, &mut z);
        return ElementSolution {
            y,
            objective,
            converged: true,
            iterations: 0,
        };
    }

    let mut starts = vec![sample_mean(xb, dim, n)];
    if !kind.is_convex() {
        starts.push(coordinate_median(xb, dim, n));
    }
    let lbfgs = LbfgsOptions {
        tol: threshold,
        max_iter: opts.max_iter,
        history: opts.history,
    };
    let mut best: Option<ElementSolution<T>> = None;
    for u0 in &starts {
        let out = lbfgs_minimize(
            |u: &[T], g: &mut [T]| pool_objective(xb, dim, kind, u, g, &mut resid, &mut z),
            u0,
            &lbfgs,
        );
        let better = best.as_ref().is_none_or(|b| out.value < b.objective);
        if better {
            best = Some(ElementSolution {
                y: out.u,
                objective: out.value,
                converged: out.converged,
                iterations: out.iterations,
            });
        }
    }
    best.expect("at least one initialisation")
}

/// Solves the pooling problem for every batch element.
///
/// Quadratic pooling returns the sample mean without iterating. Convex penalties start
/// L-BFGS from the mean; non-convex ones (Welsch, truncated quadratic) also start from
/// the coordinate-wise median and keep the lower objective. Elements that hit
/// `max_iter` are flagged in `converged` rather than reported as errors.
pub fn pool_forward<T: Real>(
    x: &PointSet<T>,
    kind: &PenaltyKind,
    opts: &PoolOptions,
) -> Result<PoolResult<T>> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(
            "forward tolerance must be positive".into(),
        ));
    }
    let (b, m) = (x.batch, x.dim);
    let solve = |i: usize| forward_element(x.element(i), m, kind, opts);
    let parts: Vec<ElementSolution<T>> = if opts.parallel {
        (0..b).into_par_iter().map(solve).collect()
    } else {
        (0..b).map(solve).collect()
    };
    let mut y: Buf<T> = Buf::zeros(b * m);
    let mut result = PoolResult {
        y: Buf::zeros(0),
        objective: Vec::with_capacity(b),
        converged: Vec::with_capacity(b),
        iterations: Vec::with_capacity(b),
    };
    for (i, part) in parts.into_iter().enumerate() {
        y[i * m..(i + 1) * m].copy_from_slice(&part.y);
        result.objective.push(part.objective);
        result.converged.push(part.converged);
        result.iterations.push(part.iterations);
    }
    result.y = y;
    Ok(result)
}

fn check_backward_shapes<T: Real>(x: &PointSet<T>, y: &[T], v: Option<&[T]>) -> Result<()> {
    let bm = x.batch * x.dim;
    if y.len() != bm {
        return Err(Error::dims(format!("y of length {bm}"), y.len()));
    }
    if let Some(v) = v {
        if v.len() != bm {
            return Err(Error::dims(format!("v of length {bm}"), v.len()));
        }
    }
    Ok(())
}

/// Writes `d = y - x` into `out` (`m x n`) and returns `(z, kappa1, kappa2)`.
fn distances_and_kappas<T: Real>(
    xb: &[T],
    yb: &[T],
    kind: &PenaltyKind,
    out: &mut [T],
) -> (Buf<T>, Buf<T>, Buf<T>) {
    let m = yb.len();
    let n = xb.len() / m;
    for k in 0..m {
        for (o, &xv) in out[k * n..(k + 1) * n]
            .iter_mut()
            .zip(&xb[k * n..(k + 1) * n])
        {
            *o = yb[k] - xv;
        }
    }
    let mut z: Buf<T> = Buf::zeros(n);
    for k in 0..m {
        for (zi, &d) in z.iter_mut().zip(&out[k * n..(k + 1) * n]) {
            *zi += d * d;
        }
    }
    let eps = T::lit(BACKWARD_NORM_EPS);
    let mut k1: Buf<T> = Buf::zeros(n);
    let mut k2: Buf<T> = Buf::zeros(n);
    for i in 0..n {
        z[i] = z[i].sqrt() + eps;
        let kp = kind.kappa(z[i]);
        k1[i] = kp.kappa1;
        k2[i] = kp.kappa2;
    }
    (z, k1, k2)
}

/// Assembles `H` (lower triangle only) into an `m x m` buffer.
fn assemble_hessian_lower<T: Real>(d: &[T], k1: &[T], k2: &[T], m: usize) -> Buf<T> {
    let n = k1.len();
    let k1_sum = k1.iter().fold(T::zero(), |s, &v| s + v);
    let mut h: Buf<T> = Buf::zeros(m * m);
    for a in 0..m {
        let da = &d[a * n..(a + 1) * n];
        for c in 0..=a {
            let dc = &d[c * n..(c + 1) * n];
            let mut s = T::zero();
            for i in 0..n {
                s += da[i] * k2[i] * dc[i];
            }
            h[a * m + c] = if a == c { s + k1_sum } else { s };
        }
    }
    h
}

fn backward_element<T: Real>(
    xb: &[T],
    yb: &[T],
    vb: &[T],
    kind: &PenaltyKind,
    opts: &PoolBackwardOptions,
    out: &mut [T],
) -> Result<()> {
    let m = yb.len();
    let n = xb.len() / m;
    let reg = T::lit(opts.regularization);
    let (mut z, k1, mut k2) = distances_and_kappas(xb, yb, kind, out);

    if opts.fast_path && k2.iter().all(|&v| v == T::zero()) {
        let total = k1.iter().fold(T::zero(), |s, &v| s + v) + reg;
        if !(total > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                pivot: 0,
                value: total.as_f64(),
            });
        }
        for k in 0..m {
            let scale = vb[k] / total;
            for (o, &w) in out[k * n..(k + 1) * n].iter_mut().zip(k1.iter()) {
                *o = w * scale;
            }
        }
        return Ok(());
    }

    let mut h = assemble_hessian_lower(out, &k1, &k2, m);
    factor_lower_in_place(m, &mut h, reg)?;
    let factor = CholeskyFactor::from_factored(m, h);
    let mut w = Buf::from_slice(vb);
    factor.solve_in_place(&mut w)?;
    drop(factor);

    // z <- d_i . w, then kappa2_i <- kappa2_i (d_i . w)
    z.iter_mut().for_each(|v| *v = T::zero());
    for k in 0..m {
        axpy(w[k], &out[k * n..(k + 1) * n], &mut z);
    }
    for (c, &p) in k2.iter_mut().zip(z.iter()) {
        *c *= p;
    }
    for k in 0..m {
        let wk = w[k];
        for ((o, &a), &c) in out[k * n..(k + 1) * n]
            .iter_mut()
            .zip(k1.iter())
            .zip(k2.iter())
        {
            *o = a * wk + c * *o;
        }
    }
    Ok(())
}

/// Structured backward pass. Returns `dJ/dx` with the layout of `x` (`b x m x n`).
///
/// `y` must be a stationary point of the pooling objective for `x`; this is not
/// re-verified. Fails with [`Error::NotPositiveDefinite`] when `H` is singular, e.g.
/// when every point of a truncated quadratic lies outside the threshold; a positive
/// `regularization` then yields a damped gradient.
pub fn pool_backward<T: Real>(
    x: &PointSet<T>,
    y: &[T],
    kind: &PenaltyKind,
    v: &[T],
    opts: &PoolBackwardOptions,
) -> Result<Buf<T>> {
    check_backward_shapes(x, y, Some(v))?;
    let (m, n) = (x.dim, x.points);
    let mut out: Buf<T> = Buf::zeros(x.batch * m * n);
    let run = |(i, chunk): (usize, &mut [T])| {
        backward_element(
            x.element(i),
            &y[i * m..(i + 1) * m],
            &v[i * m..(i + 1) * m],
            kind,
            opts,
            chunk,
        )
    };
    if opts.parallel {
        out.par_chunks_mut(m * n).enumerate().try_for_each(run)?;
    } else {
        out.chunks_mut(m * n).enumerate().try_for_each(run)?;
    }
    Ok(out)
}

/// Full Jacobian `Dy(x)` with layout `b x m x m x n`: entry `[b][k][l][j]` is
/// `d y_k / d x_{l j}`.
///
/// Materialises `-H^-1 B_j = H^-1 (kappa1(z_j) I + kappa2(z_j) d_j d_j^T)` for every
/// point, i.e. `O(n m^2)` memory. Kept as the baseline for the structured backward.
pub fn pool_jacobian_naive<T: Real>(
    x: &PointSet<T>,
    y: &[T],
    kind: &PenaltyKind,
    opts: &PoolBackwardOptions,
) -> Result<Buf<T>> {
    check_backward_shapes(x, y, None)?;
    let (b, m, n) = (x.batch, x.dim, x.points);
    let reg = T::lit(opts.regularization);
    let mut jac: Buf<T> = Buf::zeros(b * m * m * n);
    for bi in 0..b {
        let yb = &y[bi * m..(bi + 1) * m];
        let mut d: Buf<T> = Buf::zeros(m * n);
        let (_z, k1, k2) = distances_and_kappas(x.element(bi), yb, kind, &mut d);
        let mut h = assemble_hessian_lower(&d, &k1, &k2, m);
        factor_lower_in_place(m, &mut h, reg)?;
        let factor = CholeskyFactor::from_factored(m, h);
        let mut hinv = DenseMatrix::identity(m);
        factor.solve_matrix_in_place(&mut hinv)?;
        // t = H^-1 D, one column per point.
        let dmat = DenseMatrix::from_vec(m, n, d.as_slice().to_vec())?;
        let t = hinv.matmul(&dmat)?;
        let block = &mut jac[bi * m * m * n..(bi + 1) * m * m * n];
        for k in 0..m {
            for l in 0..m {
                let hkl = hinv[(k, l)];
                let dst = &mut block[(k * m + l) * n..(k * m + l + 1) * n];
                let (tk, dl) = (t.row(k), &d[l * n..(l + 1) * n]);
                for j in 0..n {
                    dst[j] = k1[j] * hkl + k2[j] * tk[j] * dl[j];
                }
            }
        }
    }
    Ok(jac)
}
