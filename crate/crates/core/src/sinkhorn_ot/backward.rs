use rayon::prelude::*;

use super::{
    unrolled, BackwardMethod, OtBackwardOptions, OtGradients, TransportPlan, TransportProblem,
};
use crate::error::{Error, Result};
use crate::linalg::{factor_lower_in_place, solve_bordered_diagonal, CholeskyFactor, DenseMatrix};
use crate::scalar::{axpy, Real};
use crate::workspace::Buf;

/// Row sums of rows `1..m` and all column sums of `P`.
fn reduced_marginals<T: Real>(p: &[T], m: usize, n: usize) -> (Buf<T>, Buf<T>) {
    let rows: Buf<T> = (1..m)
        .map(|i| p[i * n..(i + 1) * n].iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    let mut cols: Buf<T> = Buf::zeros(n);
    for row in p.chunks_exact(n) {
        axpy(T::one(), row, &mut cols);
    }
    (rows, cols)
}

/// `A H^-1 A^T` for batch element `b` with the first row constraint removed:
///
/// ```text
/// gamma [ diag(P_{2:m} 1)   P_{2:m}     ]
///       [ P_{2:m}^T         diag(P^T 1) ]
/// ```
///
/// The diagonal blocks use the plan's own marginals, which equal `r_{2:m}` and `c`
/// once the plan is feasible.
pub fn assemble_ahinv_at<T: Real>(plan: &TransportPlan<T>, b: usize, gamma: f64) -> DenseMatrix<T> {
    let (m, n) = (plan.m, plan.n);
    let p = plan.element(b);
    let g = T::lit(gamma);
    let dim = m + n - 1;
    let (rows, cols) = reduced_marginals(p, m, n);
    let mut s = DenseMatrix::zeros(dim, dim);
    for i in 1..m {
        s[(i - 1, i - 1)] = g * rows[i - 1];
        for j in 0..n {
            let v = g * p[i * n + j];
            s[(i - 1, m - 1 + j)] = v;
            s[(m - 1 + j, i - 1)] = v;
        }
    }
    for j in 0..n {
        s[(m - 1 + j, m - 1 + j)] = g * cols[j];
    }
    s
}

/// Solves `[v1; v2] = S^-1 [a; b]` with `S = A H^-1 A^T / gamma`.
fn multipliers_block<T: Real>(
    p: &[T],
    m: usize,
    n: usize,
    a: &[T],
    b: &[T],
    reg: T,
) -> Result<(Buf<T>, Buf<T>)> {
    let (rows, cols) = reduced_marginals(p, m, n);
    solve_bordered_diagonal(&rows, &p[n..], &cols, a, b, reg)
}

fn multipliers_full<T: Real>(
    p: &[T],
    m: usize,
    n: usize,
    a: &[T],
    b: &[T],
    reg: T,
) -> Result<(Buf<T>, Buf<T>)> {
    let dim = m + n - 1;
    let (rows, cols) = reduced_marginals(p, m, n);
    // Lower triangle only: [diag(rows) 0; P_{2:m}^T diag(cols)].
    let mut s: Buf<T> = Buf::zeros(dim * dim);
    for i in 0..m - 1 {
        s[i * dim + i] = rows[i];
    }
    for j in 0..n {
        let r = m - 1 + j;
        for i in 1..m {
            s[r * dim + i - 1] = p[i * n + j];
        }
        s[r * dim + r] = cols[j];
    }
    factor_lower_in_place(dim, &mut s, reg)?;
    let factor = CholeskyFactor::from_factored(dim, s);
    let mut x: Buf<T> = a.iter().chain(b).copied().collect();
    factor.solve_in_place(&mut x)?;
    let v1 = Buf::from_slice(&x[..m - 1]);
    let v2 = Buf::from_slice(&x[m - 1..]);
    Ok((v1, v2))
}

#[allow(clippy::too_many_arguments)]
fn structured_element<T: Real>(
    p: &[T],
    m: usize,
    n: usize,
    gamma: T,
    djdp: &[T],
    full: bool,
    reg: T,
    grad_m: &mut [T],
    grad_r: &mut [T],
    grad_c: &mut [T],
) -> Result<()> {
    // -v^T H^-1 B with H^-1 = diag(gamma P) and B = I: the gradient with the
    // constraints ignored.
    for ((g, &pij), &dij) in grad_m.iter_mut().zip(p).zip(djdp) {
        *g = -gamma * pij * dij;
    }
    // [a; b] = A applied to that, as row sums (rows 2..m) and column sums.
    let a: Buf<T> = (1..m)
        .map(|i| {
            grad_m[i * n..(i + 1) * n]
                .iter()
                .fold(T::zero(), |s, &v| s + v)
        })
        .collect();
    let mut b: Buf<T> = Buf::zeros(n);
    for row in grad_m.chunks_exact(n) {
        axpy(T::one(), row, &mut b);
    }
    let (v1, v2) = if full {
        multipliers_full(p, m, n, &a, &b, reg)?
    } else {
        multipliers_block(p, m, n, &a, &b, reg)?
    };
    for i in 0..m {
        let shift = if i == 0 { T::zero() } else { v1[i - 1] };
        let row = &mut grad_m[i * n..(i + 1) * n];
        for ((g, &pij), &w) in row.iter_mut().zip(&p[i * n..(i + 1) * n]).zip(v2.iter()) {
            *g -= (shift + w) * pij;
        }
    }
    if m == 1 || n == 1 {
        // The plan is pinned by its marginals.
        grad_m.iter_mut().for_each(|g| *g = T::zero());
    }
    let scale = -T::one() / gamma;
    grad_r[0] = T::zero();
    for i in 1..m {
        grad_r[i] = scale * v1[i - 1];
    }
    for j in 0..n {
        grad_c[j] = scale * v2[j];
    }
    Ok(())
}

/// Backward pass through the transport node given `dJ/dP` (`b x m x n`).
///
/// The structured methods need only the plan; they assume it is optimal (residual
/// around `1e-9` or better) and differentiate the exact optimality conditions.
/// [`BackwardMethod::Unrolled`] requires a plan produced with `record_tape` and
/// differentiates the recorded iterations instead.
///
/// A [`Error::NotPositiveDefinite`] failure of the Schur complement indicates a
/// nearly degenerate plan; solve the forward problem longer or add regularization.
pub fn ot_backward<T: Real>(
    prob: &TransportProblem<T>,
    plan: &TransportPlan<T>,
    djdp: &[T],
    method: BackwardMethod,
    opts: &OtBackwardOptions,
) -> Result<OtGradients<T>> {
    let (bsz, m, n) = (prob.batch, prob.m, prob.n);
    if plan.batch != bsz || plan.m != m || plan.n != n {
        return Err(Error::dims(
            format!("plan {bsz}x{m}x{n}"),
            format!("plan {}x{}x{}", plan.batch, plan.m, plan.n),
        ));
    }
    if djdp.len() != bsz * m * n {
        return Err(Error::dims(bsz * m * n, djdp.len()));
    }
    let tape = match method {
        BackwardMethod::Unrolled => Some(plan.tape.as_ref().ok_or_else(|| {
            Error::InvalidInput("unrolled backward needs a plan recorded with record_tape".into())
        })?),
        _ => None,
    };
    let gamma = T::lit(prob.gamma);
    let reg = T::lit(opts.regularization);
    let mut grads = OtGradients {
        dj_dm: Buf::zeros(bsz * m * n),
        dj_dr: Buf::zeros(bsz * m),
        dj_dc: Buf::zeros(bsz * n),
    };
    let run = |(b, ((gm, gr), gc)): (usize, ((&mut [T], &mut [T]), &mut [T]))| -> Result<()> {
        let p = plan.element(b);
        let dp = &djdp[b * m * n..(b + 1) * m * n];
        match method {
            BackwardMethod::StructuredBlock | BackwardMethod::StructuredFull => structured_element(
                p,
                m,
                n,
                gamma,
                dp,
                method == BackwardMethod::StructuredFull,
                reg,
                gm,
                gr,
                gc,
            ),
            BackwardMethod::Unrolled => {
                let iterates = tape.map_or(&[][..], |t| &t.iterates[b][..]);
                gm.copy_from_slice(dp);
                unrolled::backward_element(
                    iterates,
                    p,
                    prob.r_element(b),
                    prob.c_element(b),
                    gamma,
                    gm,
                    gr,
                    gc,
                );
                Ok(())
            }
        }
    };
    if opts.parallel {
        grads
            .dj_dm
            .par_chunks_mut(m * n)
            .zip(grads.dj_dr.par_chunks_mut(m))
            .zip(grads.dj_dc.par_chunks_mut(n))
            .enumerate()
            .try_for_each(run)?;
    } else {
        grads
            .dj_dm
            .chunks_mut(m * n)
            .zip(grads.dj_dr.chunks_mut(m))
            .zip(grads.dj_dc.chunks_mut(n))
            .enumerate()
            .try_for_each(run)?;
    }
    Ok(grads)
}

/// Chain rule through `r = r~ / 1^T r~`: returns `g^T (I - r 1^T) / scale` for each
/// batch element, where `scale = 1^T r~`.
pub fn simplex_reparam_vjp<T: Real>(r: &[T], scale: &[T], g: &[T]) -> Result<Buf<T>> {
    let b = scale.len();
    if b == 0 || r.len() != g.len() || r.len() % b != 0 {
        return Err(Error::dims(
            format!("r and g of equal length divisible by {b}"),
            format!("r {}, g {}", r.len(), g.len()),
        ));
    }
    if scale.iter().any(|&s| !(s > T::zero())) {
        return Err(Error::InvalidInput(
            "reparametrisation scale must be positive".into(),
        ));
    }
    let m = r.len() / b;
    let mut out: Buf<T> = Buf::zeros(r.len());
    for k in 0..b {
        let (rk, gk) = (&r[k * m..(k + 1) * m], &g[k * m..(k + 1) * m]);
        let gr = gk.iter().zip(rk).fold(T::zero(), |s, (&x, &y)| s + x * y);
        for (o, &gi) in out[k * m..(k + 1) * m].iter_mut().zip(gk) {
            *o = (gi - gr) / scale[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{ot_forward, SinkhornOptions};
    use super::*;

    #[test]
    fn ahinv_at_uniform_two_by_two() {
        let prob = TransportProblem::new(1, 2, 2, vec![0.3f64; 4], vec![0.5; 2], vec![0.5; 2], 1.0)
            .unwrap();
        let plan = ot_forward(&prob, &SinkhornOptions::default()).unwrap();
        let s = assemble_ahinv_at(&plan, 0, 1.0);
        let expect: [[f64; 3]; 3] = [[0.5, 0.25, 0.25], [0.25, 0.5, 0.0], [0.25, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[(i, j)] - expect[i][j]).abs() < 1e-15);
                assert_eq!(s[(i, j)], s[(j, i)]);
            }
        }
    }

    #[test]
    fn reparam_annihilates_constants() {
        let r = [0.2f64, 0.3, 0.5];
        let out = simplex_reparam_vjp(&r, &[2.0], &[4.0, 4.0, 4.0]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn reparam_uniform_unit_scale() {
        let r = [1.0f64 / 3.0; 3];
        let g = [1.0, -2.0, 4.0];
        let out = simplex_reparam_vjp(&r, &[1.0], &g).unwrap();
        // g - (g . r) 1 with g . r = 1.
        for (o, e) in out.iter().zip([0.0, -3.0, 3.0]) {
            assert!((o - e).abs() < 1e-15);
        }
        assert!(simplex_reparam_vjp(&r, &[0.0], &g).is_err());
        assert!(simplex_reparam_vjp(&r, &[1.0], &g[..2]).is_err());
    }

    #[test]
    fn unrolled_requires_tape() {
        let prob = TransportProblem::new(1, 2, 2, vec![0.3f64; 4], vec![0.5; 2], vec![0.5; 2], 1.0)
            .unwrap();
        let plan = ot_forward(&prob, &SinkhornOptions::default()).unwrap();
        let r = ot_backward(
            &prob,
            &plan,
            &[1.0; 4],
            BackwardMethod::Unrolled,
            &OtBackwardOptions::default(),
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
