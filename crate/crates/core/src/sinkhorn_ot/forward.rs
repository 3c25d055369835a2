use rayon::prelude::*;

use super::unrolled::{record_element, SinkhornTape};
use super::{SinkhornOptions, TransportPlan, TransportProblem};
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Real};
use crate::workspace::Buf;

pub(super) struct ElementPlan<T> {
    pub p: Buf<T>,
    pub iterations: usize,
    pub log_domain: bool,
    pub tape: Option<Vec<Buf<T>>>,
}

/// `max(|P1 - r|_inf, |P^T 1 - c|_inf)`
pub(crate) fn marginal_residual<T: Real>(p: &[T], r: &[T], c: &[T]) -> f64 {
    let n = c.len();
    let mut col: Buf<T> = Buf::zeros(n);
    let mut worst = 0.0f64;
    for (i, &ri) in r.iter().enumerate() {
        let row = &p[i * n..(i + 1) * n];
        let s = row.iter().fold(T::zero(), |a, &v| a + v);
        worst = worst.max((s - ri).abs().as_f64());
        axpy(T::one(), row, &mut col);
    }
    for (&s, &cj) in col.iter().zip(c) {
        worst = worst.max((s - cj).abs().as_f64());
    }
    worst
}

/// Gibbs kernel `K_ij = r_i c_j exp(-gamma M_ij)`. Fails if any entry underflows.
pub(super) fn gibbs_kernel<T: Real>(
    cost: &[T],
    r: &[T],
    c: &[T],
    gamma: T,
    batch: usize,
) -> Result<Buf<T>> {
    let n = c.len();
    let mut k: Buf<T> = Buf::zeros(cost.len());
    for (i, &ri) in r.iter().enumerate() {
        for j in 0..n {
            let v = ri * c[j] * (-gamma * cost[i * n + j]).exp();
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::NumericalUnderflow { batch });
            }
            k[i * n + j] = v;
        }
    }
    Ok(k)
}

fn linear_element<T: Real>(
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
    let mut u: Buf<T> = Buf::filled(m, T::one());
    let mut v: Buf<T> = Buf::filled(n, T::one());
    let mut kv: Buf<T> = Buf::zeros(m);
    let mut ktu: Buf<T> = Buf::zeros(n);
    let mut iterations = 0;
    loop {
        for i in 0..m {
            kv[i] = dot(&p[i * n..(i + 1) * n], &v);
        }
        if iterations > 0 {
            // Columns are exact after the v-update, so only rows need checking.
            let res = (0..m).fold(T::zero(), |w, i| w.max((u[i] * kv[i] - r[i]).abs()));
            if res <= tol {
                break;
            }
        }
        if iterations == opts.max_iter {
            break;
        }
        for i in 0..m {
            u[i] = r[i] / kv[i];
        }
        ktu.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..m {
            axpy(u[i], &p[i * n..(i + 1) * n], &mut ktu);
        }
        for j in 0..n {
            v[j] = c[j] / ktu[j];
        }
        if u.iter()
            .chain(v.iter())
            .any(|x| !x.is_finite() || !(*x > T::zero()))
        {
            return Err(Error::NumericalUnderflow { batch });
        }
        iterations += 1;
    }
    for i in 0..m {
        let row = &mut p[i * n..(i + 1) * n];
        for (pij, &vj) in row.iter_mut().zip(v.iter()) {
            *pij *= u[i] * vj;
        }
    }
    if p.iter().any(|x| !(*x > T::zero()) || !x.is_finite()) {
        return Err(Error::NumericalUnderflow { batch });
    }
    Ok(ElementPlan {
        p,
        iterations,
        log_domain: false,
        tape: None,
    })
}

fn log_sum_exp<T: Real>(vals: impl Iterator<Item = T> + Clone) -> T {
    let hi = vals.clone().fold(T::neg_infinity(), T::max);
    if hi == T::neg_infinity() {
        return hi;
    }
    hi + vals
        .map(|x| (x - hi).exp())
        .fold(T::zero(), |a, b| a + b)
        .ln()
}

fn log_element<T: Real>(
    cost: &[T],
    r: &[T],
    c: &[T],
    gamma: T,
    opts: &SinkhornOptions,
) -> ElementPlan<T> {
    let (m, n) = (r.len(), c.len());
    let tol = T::lit(opts.tol);
    let log_r: Buf<T> = r.iter().map(|x| x.ln()).collect();
    let log_c: Buf<T> = c.iter().map(|x| x.ln()).collect();
    let mut log_k: Buf<T> = Buf::zeros(m * n);
    for i in 0..m {
        for j in 0..n {
            log_k[i * n + j] = log_r[i] + log_c[j] - gamma * cost[i * n + j];
        }
    }
    let mut f: Buf<T> = Buf::zeros(m);
    let mut g: Buf<T> = Buf::zeros(n);
    let mut row_lse: Buf<T> = Buf::zeros(m);
    let mut col_max: Buf<T> = Buf::zeros(n);
    let mut col_sum: Buf<T> = Buf::zeros(n);
    let mut iterations = 0;
    loop {
        for i in 0..m {
            let row = &log_k[i * n..(i + 1) * n];
            row_lse[i] = log_sum_exp(row.iter().zip(g.iter()).map(|(&a, &b)| a + b));
        }
        if iterations > 0 {
            let res = (0..m).fold(T::zero(), |w, i| {
                w.max(((f[i] + row_lse[i]).exp() - r[i]).abs())
            });
            if res <= tol {
                break;
            }
        }
        if iterations == opts.max_iter {
            break;
        }
        for i in 0..m {
            f[i] = log_r[i] - row_lse[i];
        }
        col_max.iter_mut().for_each(|x| *x = T::neg_infinity());
        for i in 0..m {
            let row = &log_k[i * n..(i + 1) * n];
            for (cm, &a) in col_max.iter_mut().zip(row) {
                *cm = cm.max(a + f[i]);
            }
        }
        col_sum.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..m {
            let row = &log_k[i * n..(i + 1) * n];
            for ((s, &a), &cm) in col_sum.iter_mut().zip(row).zip(col_max.iter()) {
                *s += (a + f[i] - cm).exp();
            }
        }
        for j in 0..n {
            g[j] = log_c[j] - (col_max[j] + col_sum[j].ln());
        }
        iterations += 1;
    }
    for i in 0..m {
        let row = &mut log_k[i * n..(i + 1) * n];
        for (x, &gj) in row.iter_mut().zip(g.iter()) {
            *x = (*x + f[i] + gj).exp();
        }
    }
    ElementPlan {
        p: log_k,
        iterations,
        log_domain: true,
        tape: None,
    }
}

fn solve_element<T: Real>(
    prob: &TransportProblem<T>,
    b: usize,
    opts: &SinkhornOptions,
) -> Result<ElementPlan<T>> {
    let (cost, r, c) = (prob.cost_element(b), prob.r_element(b), prob.c_element(b));
    let gamma = T::lit(prob.gamma);
    if opts.record_tape {
        return record_element(cost, r, c, gamma, opts, b);
    }
    if opts.log_domain {
        return Ok(log_element(cost, r, c, gamma, opts));
    }
    match linear_element(cost, r, c, gamma, opts, b) {
        Err(Error::NumericalUnderflow { .. }) if opts.auto_log_domain => {
            log::debug!("batch {b}: linear-domain Sinkhorn underflowed, switching to log domain");
            Ok(log_element(cost, r, c, gamma, opts))
        }
        other => other,
    }
}

/// Runs Sinkhorn on every batch element.
///
/// Elements that exhaust `max_iter` come back with `converged = false`. In linear mode
/// with `auto_log_domain` off, a kernel or scaling underflow is reported as
/// [`Error::NumericalUnderflow`].
pub fn ot_forward<T: Real>(
    prob: &TransportProblem<T>,
    opts: &SinkhornOptions,
) -> Result<TransportPlan<T>> {
    if !(opts.tol >= 0.0) {
        return Err(Error::InvalidInput("tolerance must be non-negative".into()));
    }
    let (bsz, m, n) = (prob.batch, prob.m, prob.n);
    let parts: Vec<ElementPlan<T>> = if opts.parallel {
        (0..bsz)
            .into_par_iter()
            .map(|b| solve_element(prob, b, opts))
            .collect::<Result<_>>()?
    } else {
        (0..bsz)
            .map(|b| solve_element(prob, b, opts))
            .collect::<Result<_>>()?
    };

    let mut plan = TransportPlan {
        batch: bsz,
        m,
        n,
        p: Buf::zeros(bsz * m * n),
        residual: Vec::with_capacity(bsz),
        iterations: Vec::with_capacity(bsz),
        converged: Vec::with_capacity(bsz),
        log_domain: Vec::with_capacity(bsz),
        tape: None,
    };
    let mut tapes = Vec::new();
    for (b, part) in parts.into_iter().enumerate() {
        let res = marginal_residual(&part.p, prob.r_element(b), prob.c_element(b));
        plan.p[b * m * n..(b + 1) * m * n].copy_from_slice(&part.p);
        plan.residual.push(res);
        plan.converged.push(res <= opts.tol);
        plan.iterations.push(part.iterations);
        plan.log_domain.push(part.log_domain);
        if let Some(t) = part.tape {
            tapes.push(t);
        }
    }
    if opts.record_tape {
        plan.tape = Some(SinkhornTape { iterates: tapes });
    }
    Ok(plan)
}
