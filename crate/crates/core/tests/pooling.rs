mod common;

use common::*;
use ddn_core::{
    compare_vjp, fd_vjp, pool_backward, pool_forward, pool_jacobian_naive, track_workspace, FdStep,
    PenaltyFamily, PenaltyKind, PointSet, PoolBackwardOptions, PoolOptions,
};
use proptest::prelude::*;

fn tight() -> PoolOptions {
    PoolOptions {
        tol: 1e-14,
        max_iter: 2000,
        ..Default::default()
    }
}

/// Distances from `y` to each point of batch element `b`.
fn distances(x: &PointSet, y: &[f64], b: usize) -> Vec<f64> {
    let (m, n) = (x.dim(), x.points());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|k| (y[b * m + k] - x.coord(b, k, i)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Grows `alpha` until no distance at the solution is within `1e-3` of it.
fn clear_of_branches(x: &PointSet, family: PenaltyFamily, mut alpha: f64) -> PenaltyKind {
    loop {
        let kind = PenaltyKind::new(family, alpha).unwrap();
        let res = pool_forward(x, &kind, &tight()).unwrap();
        let near = (0..x.batch())
            .flat_map(|b| distances(x, &res.y, b))
            .any(|z| (z - alpha).abs() <= 1e-3);
        if !near
            || !matches!(
                family,
                PenaltyFamily::Huber
                    | PenaltyFamily::PseudoHuber
                    | PenaltyFamily::TruncatedQuadratic
            )
        {
            return kind;
        }
        alpha *= 1.07;
    }
}

fn fd_report(x: &PointSet, kind: &PenaltyKind, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let (b, m, n) = (x.batch(), x.dim(), x.points());
    let res = pool_forward(x, kind, &tight()).unwrap();
    assert!(res.converged.iter().all(|&c| c));
    let v = normal_vec(&mut rng(seed), b * m);
    let analytic = pool_backward(x, &res.y, kind, &v, &Default::default()).unwrap();
    let forward = |data: &[f64]| {
        let xs = PointSet::new(b, m, n, data.to_vec())?;
        Ok(pool_forward(&xs, kind, &tight())?.y.into_vec())
    };
    let numeric = fd_vjp(forward, x.as_slice(), &v, FdStep::default()).unwrap();
    (analytic.into_vec(), numeric)
}

fn pooled(x: &PointSet, kind: &PenaltyKind) -> Vec<f64> {
    pool_forward(x, kind, &tight()).unwrap().y.into_vec()
}

#[test]
fn quadratic_is_the_mean() {
    let x = PointSet::from_points(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]]).unwrap();
    assert_eq!(pooled(&x, &PenaltyKind::quadratic()), vec![2.0, 0.0]);
    let huber = PenaltyKind::new(PenaltyFamily::Huber, 100.0).unwrap();
    let y = pooled(&x, &huber);
    assert!((y[0] - 2.0).abs() < 1e-10 && y[1].abs() < 1e-10);

    let x = normal_points(3, 3, 5, 40);
    let y = pooled(&x, &PenaltyKind::quadratic());
    for b in 0..3 {
        for k in 0..5 {
            let mean = (0..40).map(|i| x.coord(b, k, i)).sum::<f64>() / 40.0;
            assert!((y[b * 5 + k] - mean).abs() <= 1e-14);
        }
    }
}

#[test]
fn welsch_suppresses_outlier() {
    let x = PointSet::from_points(&[vec![0.0], vec![0.2], vec![10.0]]).unwrap();
    let kind = PenaltyKind::new(PenaltyFamily::Welsch, 1.0).unwrap();
    let f = |u: f64| {
        [0.0, 0.2, 10.0]
            .iter()
            .map(|&p: &f64| kind.phi((u - p).abs()))
            .sum::<f64>()
    };
    // Grid search over [-1, 11], then golden-section refinement.
    let mut best = -1.0;
    for i in 0..=120_000 {
        let u = -1.0 + i as f64 * 1e-4;
        if f(u) < f(best) {
            best = u;
        }
    }
    let (mut lo, mut hi) = (best - 1e-4, best + 1e-4);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let y = pooled(&x, &kind);
    assert!((y[0] - 0.5 * (lo + hi)).abs() < 1e-7, "{} vs {}", y[0], lo);
    assert!(y[0] > 0.0 && y[0] < 0.2);
}

#[test]
fn backward_matches_finite_differences_for_every_penalty() {
    let x = normal_points(1, 2, 4, 16);
    for family in PenaltyFamily::ALL {
        let kind = clear_of_branches(&x, family, 1.0);
        let (a, b) = fd_report(&x, &kind, 5);
        // The absolute floor sits at the round-off level of the differences.
        let rep = compare_vjp(&a, &b, 1e-5, 1e-9 * max_abs(&b)).unwrap();
        assert!(rep.passed, "{family}: max rel err {:e}", rep.max_rel_err);
    }
}

#[test]
fn welsch_unit_vector_finite_differences() {
    let x = normal_points(8, 1, 3, 8);
    let kind = PenaltyKind::new(PenaltyFamily::Welsch, 1.0).unwrap();
    let y = pooled(&x, &kind);
    let v = [1.0, 0.0, 0.0];
    let analytic = pool_backward(&x, &y, &kind, &v, &Default::default()).unwrap();
    let forward = |d: &[f64]| {
        Ok(
            pool_forward(&PointSet::new(1, 3, 8, d.to_vec())?, &kind, &tight())?
                .y
                .into_vec(),
        )
    };
    let numeric = fd_vjp(forward, x.as_slice(), &v, FdStep::default()).unwrap();
    let rep = compare_vjp(&analytic, &numeric, 1e-5, 1e-9 * max_abs(&numeric)).unwrap();
    assert!(rep.passed, "max rel err {:e}", rep.max_rel_err);
}

#[test]
fn quadratic_gradient_is_uniform() {
    let x = normal_points(4, 2, 3, 4);
    let y = pooled(&x, &PenaltyKind::quadratic());
    let v = [0.3, -1.2, 2.0, 0.5, 0.25, -4.0];
    let g = pool_backward(&x, &y, &PenaltyKind::quadratic(), &v, &Default::default()).unwrap();
    for b in 0..2 {
        for k in 0..3 {
            for i in 0..4 {
                assert_eq!(g[(b * 3 + k) * 4 + i], v[b * 3 + k] / 4.0);
            }
        }
    }
    // Huber with every point inside the threshold behaves the same.
    let huber = PenaltyKind::new(PenaltyFamily::Huber, 1e3).unwrap();
    let y = pooled(&x, &huber);
    let g = pool_backward(&x, &y, &huber, &v, &Default::default()).unwrap();
    for (idx, gi) in g.iter().enumerate() {
        assert!((gi - v[idx / 4] / 4.0).abs() < 1e-12);
    }
}

#[test]
fn fast_path_matches_general_path() {
    let x = normal_points(12, 3, 4, 25);
    for kind in [
        PenaltyKind::quadratic(),
        PenaltyKind::new(PenaltyFamily::TruncatedQuadratic, 2.0).unwrap(),
    ] {
        let y = pooled(&x, &kind);
        let v = normal_vec(&mut rng(1), 12);
        let fast = pool_backward(&x, &y, &kind, &v, &Default::default()).unwrap();
        let general = pool_backward(
            &x,
            &y,
            &kind,
            &v,
            &PoolBackwardOptions {
                fast_path: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(max_abs_diff(&fast, &general) <= 1e-12);
    }
}

#[test]
fn naive_jacobian_contracts_to_backward() {
    let x = normal_points(17, 2, 4, 9);
    let kind = PenaltyKind::new(PenaltyFamily::Huber, 0.8).unwrap();
    let y = pooled(&x, &kind);
    let v = normal_vec(&mut rng(2), 8);
    let g = pool_backward(&x, &y, &kind, &v, &Default::default()).unwrap();
    let jac = pool_jacobian_naive(&x, &y, &kind, &Default::default()).unwrap();
    let (m, n) = (4, 9);
    for b in 0..2 {
        for l in 0..m {
            for j in 0..n {
                let c: f64 = (0..m)
                    .map(|k| v[b * m + k] * jac[((b * m + k) * m + l) * n + j])
                    .sum();
                assert!((c - g[(b * m + l) * n + j]).abs() <= 1e-10);
            }
        }
    }
    // Quadratic: every block is I / n.
    let q = PenaltyKind::quadratic();
    let jac = pool_jacobian_naive(&x, &pooled(&x, &q), &q, &Default::default()).unwrap();
    for b in 0..2 {
        for k in 0..m {
            for l in 0..m {
                for j in 0..n {
                    let e = if k == l { 1.0 / n as f64 } else { 0.0 };
                    assert!((jac[((b * m + k) * m + l) * n + j] - e).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn parallel_matches_serial() {
    let x = normal_points(23, 6, 3, 30);
    let kind = PenaltyKind::new(PenaltyFamily::Welsch, 1.5).unwrap();
    let serial = pool_forward(&x, &kind, &Default::default()).unwrap();
    let parallel = pool_forward(
        &x,
        &kind,
        &PoolOptions {
            parallel: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(serial, parallel);
    let v = normal_vec(&mut rng(4), 18);
    let a = pool_backward(&x, &serial.y, &kind, &v, &Default::default()).unwrap();
    let b = pool_backward(
        &x,
        &serial.y,
        &kind,
        &v,
        &PoolBackwardOptions {
            parallel: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn welsch_backward_workspace_is_linear() {
    let (m, n) = (64, 4096);
    let x = normal_points(31, 1, m, n);
    let kind = PenaltyKind::new(PenaltyFamily::Welsch, 1.0).unwrap();
    let y = pooled(&x, &kind);
    let v = normal_vec(&mut rng(5), m);
    let (_, peak) =
        track_workspace(|| pool_backward(&x, &y, &kind, &v, &Default::default()).unwrap());
    assert!(
        peak >= 8 * n * m && peak <= 20 * n * m + 16 * m * m,
        "peak {peak}"
    );
}

#[test]
fn degenerate_hessian_needs_regularization() {
    // Every point lies outside the truncation threshold.
    let x = PointSet::<f64>::from_points(&[vec![-5.0], vec![5.0]]).unwrap();
    let kind = PenaltyKind::new(PenaltyFamily::TruncatedQuadratic, 1.0).unwrap();
    let y = [0.0];
    let strict = PoolBackwardOptions {
        fast_path: false,
        ..Default::default()
    };
    assert!(matches!(
        pool_backward(&x, &y, &kind, &[1.0], &strict),
        Err(ddn_core::Error::NotPositiveDefinite { .. })
    ));
    let damped = pool_backward(
        &x,
        &y,
        &kind,
        &[1.0],
        &PoolBackwardOptions {
            regularization: 1e-3,
            ..strict
        },
    )
    .unwrap();
    assert!(damped.iter().all(|g| g.is_finite()));
}

/// Smallest eigenvalue of the pooling Hessian relative to its trace scale; near zero
/// when the minimiser is not isolated.
fn hessian_conditioning(x: &PointSet, y: &[f64], kind: &PenaltyKind) -> f64 {
    let m = x.dim();
    let mut h = nalgebra::DMatrix::<f64>::zeros(m, m);
    for (i, z) in distances(x, y, 0).into_iter().enumerate() {
        let k = kind.kappa(z);
        for a in 0..m {
            h[(a, a)] += k.kappa1;
            for b in 0..m {
                h[(a, b)] += k.kappa2 * (y[a] - x.coord(0, a, i)) * (y[b] - x.coord(0, b, i));
            }
        }
    }
    let scale = (0..m).map(|a| h[(a, a)].abs()).fold(0.0, f64::max);
    h.symmetric_eigen().eigenvalues.min() / scale
}

fn family() -> impl Strategy<Value = PenaltyFamily> {
    prop::sample::select(PenaltyFamily::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_sum_to_incoming(seed in 0u64..100_000, fam in family(), alpha in 0.5f64..3.0,
                                 m in 1usize..5, n in 2usize..20) {
        let x = normal_points(seed, 1, m, n);
        let kind = PenaltyKind::new(fam, alpha).unwrap();
        let res = pool_forward(&x, &kind, &tight()).unwrap();
        prop_assume!(res.converged[0]);
        prop_assume!(hessian_conditioning(&x, &res.y, &kind) > 1e-6);
        let v = normal_vec(&mut rng(seed + 1), m);
        let g = match pool_backward(&x, &res.y, &kind, &v, &Default::default()) {
            Ok(g) => g,
            // Truncated quadratic with no inliers has no curvature.
            Err(ddn_core::Error::NotPositiveDefinite { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let scale = max_abs(&v);
        for k in 0..m {
            let s: f64 = g[k * n..(k + 1) * n].iter().sum();
            prop_assert!((s - v[k]).abs() <= 1e-8 * scale, "{s} vs {}", v[k]);
        }
    }

    #[test]
    fn permuting_points_permutes_gradients(seed in 0u64..100_000, fam in family(),
                                           m in 1usize..4, n in 2usize..12, shift in 1usize..11) {
        let x = normal_points(seed, 1, m, n);
        let kind = PenaltyKind::new(fam, 1.3).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let mut data = vec![0.0; m * n];
        for k in 0..m {
            for i in 0..n {
                data[k * n + i] = x.coord(0, k, perm[i]);
            }
        }
        let xp = PointSet::new(1, m, n, data).unwrap();
        let y = pooled(&x, &kind);
        let yp = pooled(&xp, &kind);
        prop_assume!(max_abs_diff(&y, &yp) <= 1e-8);
        let v = normal_vec(&mut rng(seed + 2), m);
        let (Ok(g), Ok(gp)) = (
            pool_backward(&x, &y, &kind, &v, &Default::default()),
            pool_backward(&xp, &y, &kind, &v, &Default::default()),
        ) else {
            return Ok(());
        };
        for k in 0..m {
            for i in 0..n {
                prop_assert!((gp[k * n + i] - g[k * n + perm[i]]).abs() <= 1e-12);
            }
        }
    }
}
