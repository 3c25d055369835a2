//! Sinkhorn as successive row and column normalisations of the plan, with every
//! iterate recorded, and reverse-mode differentiation through that record.
//!
//! Iteration `t` maps `P_t` to `P_{t+1}` by
//!
//! ```text
//! A       = diag(r / P_t 1) P_t
//! P_{t+1} = A diag(c / A^T 1)
//! ```
//!
//! starting from the Gibbs kernel `P_0 = r c^T * exp(-gamma M)`. This is the same
//! recurrence as the `u, v` scaling form; storing one `m x n` matrix per iteration
//! gives the baseline whose memory grows linearly with the iteration count.

use super::forward::{gibbs_kernel, ElementPlan};
use super::SinkhornOptions;
use crate::error::{Error, Result};
use crate::scalar::{axpy, Real};
use crate::workspace::Buf;

/// Recorded iterates `P_0 .. P_{L-1}` for each batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornTape<T = f64> {
    pub(super) iterates: Vec<Vec<Buf<T>>>,
}

impl<T: Real> SinkhornTape<T> {
    pub fn bytes(&self) -> usize {
        self.iterates.iter().flatten().map(Buf::bytes).sum()
    }

    /// Number of recorded iterations of batch element `b`.
    pub fn len(&self, b: usize) -> usize {
        self.iterates.get(b).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.iter().all(Vec::is_empty)
    }
}

fn row_sums<T: Real>(p: &[T], n: usize, out: &mut [T]) {
    for (i, s) in out.iter_mut().enumerate() {
        *s = p[i * n..(i + 1) * n].iter().fold(T::zero(), |a, &v| a + v);
    }
}

fn col_sums<T: Real>(p: &[T], n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|x| *x = T::zero());
    for row in p.chunks_exact(n) {
        axpy(T::one(), row, out);
    }
}

pub(super) fn record_element<T: Real>(
    cost: &[T],
    r: &[T],
    c: &[T],
    gamma: T,
    opts: &SinkhornOptions,
    batch: usize,
) -> Result<ElementPlan<T>> {
    let (m, n) = (r.len(), c.len());
    let tol = T::lit(opts.tol);
    let mut p = gibbs_kernel(cost, r, c, gamma, batch)?;
    let mut rows: Buf<T> = Buf::zeros(m);
    let mut cols: Buf<T> = Buf::zeros(n);
    let mut tape = Vec::new();
    loop {
        row_sums(&p, n, &mut rows);
        if !tape.is_empty() {
            let res = rows
                .iter()
                .zip(r)
                .fold(T::zero(), |w, (&s, &ri)| w.max((s - ri).abs()));
            if res <= tol {
                break;
            }
        }
        if tape.len() == opts.max_iter {
            break;
        }
        let mut next = p.clone();
        for i in 0..m {
            let scale = r[i] / rows[i];
            next[i * n..(i + 1) * n]
                .iter_mut()
                .for_each(|x| *x *= scale);
        }
        col_sums(&next, n, &mut cols);
        for row in next.chunks_exact_mut(n) {
            for ((x, &s), &cj) in row.iter_mut().zip(cols.iter()).zip(c) {
                *x *= cj / s;
            }
        }
        if next.iter().any(|x| !(*x > T::zero()) || !x.is_finite()) {
            return Err(Error::NumericalUnderflow { batch });
        }
        tape.push(std::mem::replace(&mut p, next));
    }
    Ok(ElementPlan {
        iterations: tape.len(),
        p,
        log_domain: false,
        tape: Some(tape),
    })
}

/// Reverse sweep for one batch element.
///
/// On entry `grad_m` holds `dJ/dP_L`; on exit it holds `dJ/dM`. The marginal
/// gradients are shifted by the constant `k = dJ/dr_1` (`r -= k`, `c += k`), which
/// leaves their action on feasible perturbations (`sum dr = sum dc`) unchanged and
/// matches the implicit convention `dJ/dr_1 = 0`.
#[allow(clippy::too_many_arguments)]
pub(super) fn backward_element<T: Real>(
    iterates: &[Buf<T>],
    plan: &[T],
    r: &[T],
    c: &[T],
    gamma: T,
    grad_m: &mut [T],
    grad_r: &mut [T],
    grad_c: &mut [T],
) {
    let (m, n) = (r.len(), c.len());
    let mut a: Buf<T> = Buf::zeros(m * n);
    let mut q: Buf<T> = Buf::zeros(m);
    let mut s: Buf<T> = Buf::zeros(n);
    let mut h: Buf<T> = Buf::zeros(n);
    grad_r.iter_mut().for_each(|x| *x = T::zero());
    grad_c.iter_mut().for_each(|x| *x = T::zero());
    let bar = grad_m;

    for prev in iterates.iter().rev() {
        row_sums(prev, n, &mut q);
        for i in 0..m {
            let scale = r[i] / q[i];
            for j in 0..n {
                a[i * n + j] = prev[i * n + j] * scale;
            }
        }
        col_sums(&a, n, &mut s);

        // Column normalisation: P = A diag(c / s).
        h.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..m {
            for j in 0..n {
                h[j] += bar[i * n + j] * a[i * n + j];
            }
        }
        for j in 0..n {
            h[j] /= s[j];
            grad_c[j] += h[j];
        }
        for i in 0..m {
            for j in 0..n {
                let idx = i * n + j;
                bar[idx] = c[j] / s[j] * (bar[idx] - h[j]);
            }
        }

        // Row normalisation: A = diag(r / q) P_prev.
        for i in 0..m {
            let row = i * n..(i + 1) * n;
            let e = bar[row.clone()]
                .iter()
                .zip(&prev[row.clone()])
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
                / q[i];
            grad_r[i] += e;
            let scale = r[i] / q[i];
            bar[row].iter_mut().for_each(|x| *x = scale * (*x - e));
        }
    }

    // P_0 = r_i c_j exp(-gamma M_ij); with no recorded iterations it is the plan.
    let k0: &[T] = iterates.first().map_or(plan, |k| k);
    debug_assert_eq!(k0.len(), m * n);
    s.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..m {
        let mut acc = T::zero();
        for j in 0..n {
            let idx = i * n + j;
            let w = bar[idx] * k0[idx];
            acc += w;
            s[j] += w;
            bar[idx] = -gamma * w;
        }
        grad_r[i] += acc / r[i];
    }
    for j in 0..n {
        grad_c[j] += s[j] / c[j];
    }

    let k = grad_r[0];
    grad_r.iter_mut().for_each(|x| *x -= k);
    grad_c.iter_mut().for_each(|x| *x += k);
}
