//! Limited-memory BFGS with a backtracking line search.

use crate::scalar::{axpy, dot, norm2, Real};
use crate::workspace::Buf;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsOptions {
    /// Absolute tolerance on the gradient 2-norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of stored curvature pairs.
    pub history: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            tol: 1e-10,
            max_iter: 500,
            history: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome<T = f64> {
    pub u: Buf<T>,
    pub value: T,
    pub grad_norm: T,
    pub converged: bool,
    pub iterations: usize,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// Curvature pairs in a ring buffer.
struct History<T> {
    s: Buf<T>,
    y: Buf<T>,
    rho: Buf<T>,
    alpha: Buf<T>,
    dim: usize,
    cap: usize,
    len: usize,
    head: usize,
}

impl<T: Real> History<T> {
    fn new(dim: usize, cap: usize) -> Self {
        History {
            s: Buf::zeros(dim * cap),
            y: Buf::zeros(dim * cap),
            rho: Buf::zeros(cap),
            alpha: Buf::zeros(cap),
            dim,
            cap,
            len: 0,
            head: 0,
        }
    }

    fn clear(&mut self) {
        self.len = 0;
        self.head = 0;
    }

    fn push(&mut self, s: &[T], y: &[T], sy: T) {
        if self.cap == 0 {
            return;
        }
        let slot = self.head;
        let d = self.dim;
        self.s[slot * d..(slot + 1) * d].copy_from_slice(s);
        self.y[slot * d..(slot + 1) * d].copy_from_slice(y);
        self.rho[slot] = T::one() / sy;
        self.head = (self.head + 1) % self.cap;
        self.len = (self.len + 1).min(self.cap);
    }

    /// Slot index of the `k`-th newest pair (`k = 0` is the newest).
    fn slot(&self, k: usize) -> usize {
        (self.head + self.cap - 1 - k) % self.cap
    }

    /// Overwrites `d` with `-H g` using the two-loop recursion.
    fn direction(&mut self, g: &[T], d: &mut [T]) {
        let n = self.dim;
        d.iter_mut().zip(g).for_each(|(di, &gi)| *di = -gi);
        for k in 0..self.len {
            let i = self.slot(k);
            let a = self.rho[i] * dot(&self.s[i * n..(i + 1) * n], d);
            self.alpha[i] = a;
            axpy(-a, &self.y[i * n..(i + 1) * n], d);
        }
        if self.len > 0 {
            let i = self.slot(0);
            let yi = &self.y[i * n..(i + 1) * n];
            let scale = T::one() / (self.rho[i] * dot(yi, yi));
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for k in (0..self.len).rev() {
            let i = self.slot(k);
            let b = self.rho[i] * dot(&self.y[i * n..(i + 1) * n], d);
            axpy(self.alpha[i] - b, &self.s[i * n..(i + 1) * n], d);
        }
    }
}

/// Minimises a smooth function given `f(u, grad_out) -> value`.
///
/// Steps must satisfy the Armijo sufficient-decrease condition. Close to a minimiser,
/// where decreases fall below the rounding level of `f`, a step is also accepted
/// when `f` does not increase beyond that level and the directional derivative has
/// shrunk (approximate Wolfe conditions). If no step along the quasi-Newton
/// direction is acceptable the history is discarded and a steepest-descent step with
/// step halving is tried instead.
pub fn lbfgs_minimize<T, F>(mut f: F, u0: &[T], opts: &LbfgsOptions) -> LbfgsOutcome<T>
where
    T: Real,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let n = u0.len();
    let tol = T::lit(opts.tol);
    let f_eps = T::lit(1e4) * T::epsilon();

    let mut x = Buf::from_slice(u0);
    let mut g: Buf<T> = Buf::zeros(n);
    let mut fx = f(&x, &mut g);
    let mut gnorm = norm2(&g);

    let mut x_new: Buf<T> = Buf::zeros(n);
    let mut g_new: Buf<T> = Buf::zeros(n);
    let mut d: Buf<T> = Buf::zeros(n);
    let mut hist = History::new(n, opts.history);

    let mut iterations = 0;
    while gnorm > tol && iterations < opts.max_iter {
        iterations += 1;

        hist.direction(&g, &mut d);
        let mut gd = dot(&g, &d);
        if !(gd < T::zero()) || !gd.is_finite() {
            hist.clear();
            d.iter_mut().zip(g.iter()).for_each(|(di, &gi)| *di = -gi);
            gd = -gnorm * gnorm;
        }
        let first = if hist.len == 0 {
            T::one().min(T::one() / norm2(&d))
        } else {
            T::one()
        };

        let accepted = line_search(&mut f, &x, fx, &d, gd, first, f_eps, &mut x_new, &mut g_new)
            .or_else(|| {
                hist.clear();
                d.iter_mut().zip(g.iter()).for_each(|(di, &gi)| *di = -gi);
                let gd = -gnorm * gnorm;
                let first = T::one().min(T::one() / gnorm);
                line_search(&mut f, &x, fx, &d, gd, first, f_eps, &mut x_new, &mut g_new)
            });
        let Some(f_new) = accepted else {
            log::debug!("line search failed at iteration {iterations}, |g| = {gnorm}");
            break;
        };

        // Reuse `d` for s = x_new - x, then overwrite with y = g_new - g below.
        let mut sy = T::zero();
        let mut yy = T::zero();
        for i in 0..n {
            let s = x_new[i] - x[i];
            let y = g_new[i] - g[i];
            sy += s * y;
            yy += y * y;
            d[i] = s;
        }
        if sy > T::epsilon() * yy && sy.is_finite() {
            let y: Buf<T> = g_new.iter().zip(g.iter()).map(|(&a, &b)| a - b).collect();
            hist.push(&d, &y, sy);
        }

        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        gnorm = norm2(&g);
    }

    LbfgsOutcome {
        u: x,
        value: fx,
        grad_norm: gnorm,
        converged: gnorm <= tol,
        iterations,
    }
}

#[allow(clippy::too_many_arguments)]
fn line_search<T, F>(
    f: &mut F,
    x: &[T],
    fx: T,
    d: &[T],
    gd: T,
    first: T,
    f_eps: T,
    x_new: &mut [T],
    g_new: &mut [T],
) -> Option<T>
where
    T: Real,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let c1 = T::lit(ARMIJO_C1);
    let half = T::lit(0.5);
    let slack = f_eps * (T::one() + fx.abs());
    let mut step = first;
    for _ in 0..MAX_BACKTRACKS {
        for i in 0..x.len() {
            x_new[i] = x[i] + step * d[i];
        }
        let f_new = f(x_new, g_new);
        if f_new.is_finite() {
            if f_new <= fx + c1 * step * gd {
                return Some(f_new);
            }
            let gd_new = dot(g_new, d);
            if f_new <= fx + slack && gd_new >= T::lit(0.9) * gd && gd_new <= -T::lit(0.8) * gd {
                return Some(f_new);
            }
        }
        step *= half;
    }
    None
}
