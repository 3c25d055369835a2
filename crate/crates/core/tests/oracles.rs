mod common;

use common::*;
use ddn_core::{
    assemble_derivatives, compare_vjp, dy_dx_eq3, fd_vjp, ot_backward, ot_forward, pool_backward,
    pool_forward, BackwardMethod, DenseMatrix, FdStep, FdSteps, NodeSpec, PenaltyFamily,
    PenaltyKind, PointSet, PoolOptions, SinkhornOptions,
};
use proptest::prelude::*;

/// `v^T J` for a row-major `J`.
fn contract(v: &[f64], j: &DenseMatrix) -> Vec<f64> {
    (0..j.cols())
        .map(|c| (0..j.rows()).map(|r| v[r] * j[(r, c)]).sum())
        .collect()
}

/// `A J + C`, which vanishes when `J` keeps the constraints satisfied.
fn tangency_residual(a: &DenseMatrix, j: &DenseMatrix, c: &DenseMatrix) -> f64 {
    let aj = a.matmul(j).unwrap();
    max_abs_diff(
        aj.as_slice(),
        &c.as_slice().iter().map(|x| -x).collect::<Vec<_>>(),
    )
}

#[test]
fn generic_oracle_matches_welsch_pooling() {
    let (m, n) = (2, 3);
    let x = normal_points(44, 1, m, n);
    let kind = PenaltyKind::new(PenaltyFamily::Welsch, 1.0).unwrap();
    let opts = PoolOptions {
        tol: 1e-14,
        ..Default::default()
    };
    let y = pool_forward(&x, &kind, &opts).unwrap().y.into_vec();
    let spec = NodeSpec::unconstrained(m * n, m, |x, u| {
        (0..n)
            .map(|i| {
                let z = (0..m)
                    .map(|k| (u[k] - x[k * n + i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                kind.phi(z)
            })
            .sum()
    });
    let ws = assemble_derivatives(&spec, x.as_slice(), &y, FdSteps::default()).unwrap();
    let jac = dy_dx_eq3(&ws).unwrap();
    for v in [[1.0, 0.0], [0.0, 1.0], [0.6, -1.7]] {
        let oracle = contract(&v, &jac);
        let g = pool_backward(&x, &y, &kind, &v, &Default::default()).unwrap();
        let err = max_abs_diff(&g, &oracle) / max_abs(&oracle);
        assert!(err <= 1e-6, "relative error {err:e}");
    }
}

/// Transport as a constrained node over `x = [M, r, c]` with the first row
/// constraint dropped.
fn transport_spec(m: usize, n: usize, gamma: f64) -> NodeSpec<'static> {
    NodeSpec::constrained(
        m * n + m + n,
        m * n,
        m - 1 + n,
        move |x, u| {
            let (cost, rest) = x.split_at(m * n);
            let (r, c) = rest.split_at(m);
            let mut f = 0.0;
            for i in 0..m {
                for j in 0..n {
                    let p = u[i * n + j];
                    let q = r[i] * c[j];
                    f += p * cost[i * n + j] + (p * (p / q).ln() - p + q) / gamma;
                }
            }
            f
        },
        move |x, u| {
            let (r, c) = x[m * n..].split_at(m);
            let mut h: Vec<f64> = (1..m)
                .map(|i| u[i * n..(i + 1) * n].iter().sum::<f64>() - r[i])
                .collect();
            h.extend((0..n).map(|j| (0..m).map(|i| u[i * n + j]).sum::<f64>() - c[j]));
            h
        },
    )
}

#[test]
fn generic_oracle_matches_transport() {
    // Uniform marginals keep every plan entry away from zero, where the fixed
    // second-difference step of the oracle loses accuracy.
    for seed in 40..44 {
        let (m, n, gamma) = (3, 3, 1.0);
        let base = transport(seed, 1, m, n, gamma, 1.0);
        let prob = ddn_core::TransportProblem::new(
            1,
            m,
            n,
            base.cost().to_vec(),
            vec![1.0 / 3.0; 3],
            vec![1.0 / 3.0; 3],
            gamma,
        )
        .unwrap();
        let plan = ot_forward(
            &prob,
            &SinkhornOptions {
                tol: 1e-15,
                max_iter: 100_000,
                ..Default::default()
            },
        )
        .unwrap();
        let mut x = prob.cost().to_vec();
        x.extend_from_slice(prob.r());
        x.extend_from_slice(prob.c());
        let spec = transport_spec(m, n, gamma);
        let ws = assemble_derivatives(&spec, &x, &plan.p, FdSteps::default()).unwrap();
        assert!(ws.stationarity_residual < 1e-6);

        // Constraint Jacobian: rows 2..m of the row-sum operator, then column sums.
        for (k, row) in (0..m - 1 + n).map(|k| (k, ws.a.row(k))) {
            for i in 0..m {
                for j in 0..n {
                    let e = if k < m - 1 {
                        (i == k + 1) as u8
                    } else {
                        (j == k + 1 - m) as u8
                    };
                    assert!((row[i * n + j] - e as f64).abs() < 1e-9);
                }
            }
        }

        let jac = dy_dx_eq3(&ws).unwrap();
        assert!(tangency_residual(&ws.a, &jac, &ws.c) <= 1e-6);
        let v = normal_vec(&mut rng(46), m * n);
        let oracle = contract(&v, &jac);
        for method in [
            BackwardMethod::StructuredBlock,
            BackwardMethod::StructuredFull,
        ] {
            let g = ot_backward(&prob, &plan, &v, method, &Default::default()).unwrap();
            let mut analytic = g.dj_dm.into_vec();
            analytic.extend(g.dj_dr.iter());
            analytic.extend(g.dj_dc.iter());
            let err = max_abs_diff(&analytic, &oracle) / max_abs(&oracle);
            assert!(err <= 1e-6, "{method}: relative error {err:e}");
        }
    }
}

#[test]
fn generic_oracle_tangency_on_random_constrained_problem() {
    // f = |u - x|^2 / 2 + 0.3 sum u^4, constrained to w^T u = x_0.
    let w = [1.0, 2.0, -0.5];
    let spec = NodeSpec::constrained(
        3,
        3,
        1,
        |x, u| {
            0.5 * x.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                + 0.3 * u.iter().map(|t| t.powi(4)).sum::<f64>()
        },
        move |x, u| vec![dot(&w, u) - x[0]],
    );
    let x = [0.4, -0.3, 0.8];
    // Newton on the KKT system for the optimum.
    let mut u = [0.0f64; 3];
    let mut lam = 0.0;
    for _ in 0..50 {
        let g: Vec<f64> = (0..3)
            .map(|k| u[k] - x[k] + 1.2 * u[k].powi(3) - lam * w[k])
            .collect();
        let hd: Vec<f64> = (0..3).map(|k| 1.0 + 3.6 * u[k] * u[k]).collect();
        let hres = dot(&w, &u) - x[0];
        // Schur elimination with a diagonal H.
        let s: f64 = (0..3).map(|k| w[k] * w[k] / hd[k]).sum();
        let t: f64 = (0..3).map(|k| w[k] * g[k] / hd[k]).sum();
        let dl = (t - hres) / s;
        for k in 0..3 {
            u[k] -= (g[k] - dl * w[k]) / hd[k];
        }
        lam += dl;
    }
    let ws = assemble_derivatives(&spec, &x, &u, FdSteps::default()).unwrap();
    assert!(ws.stationarity_residual < 1e-8);
    assert!((ws.lambda[0] - lam).abs() < 1e-8);
    let jac = dy_dx_eq3(&ws).unwrap();
    assert!(tangency_residual(&ws.a, &jac, &ws.c) <= 1e-6);
}

#[test]
fn finite_differences_of_transport_plan() {
    let prob = transport(47, 1, 2, 2, 1.5, 1.0);
    let fixed_iters = ot_forward(
        &prob,
        &SinkhornOptions {
            tol: 1e-14,
            ..Default::default()
        },
    )
    .unwrap();
    let fixed = SinkhornOptions {
        tol: 0.0,
        max_iter: fixed_iters.iterations[0],
        ..Default::default()
    };
    let v = [1.0, 0.0, 0.0, 0.0];
    let forward = |cost: &[f64]| {
        let p = ddn_core::TransportProblem::new(
            1,
            2,
            2,
            cost.to_vec(),
            prob.r().to_vec(),
            prob.c().to_vec(),
            1.5,
        )?;
        Ok(ot_forward(&p, &fixed)?.p.into_vec())
    };
    let numeric = fd_vjp(forward, prob.cost(), &v, FdStep::default()).unwrap();
    let g = ot_backward(
        &prob,
        &fixed_iters,
        &v,
        BackwardMethod::StructuredBlock,
        &Default::default(),
    )
    .unwrap();
    assert!(compare_vjp(&g.dj_dm, &numeric, 1e-4, 0.0).unwrap().passed);
}

fn branch_free(family: PenaltyFamily, alpha: f64, z: f64) -> bool {
    match family {
        PenaltyFamily::Huber | PenaltyFamily::PseudoHuber | PenaltyFamily::TruncatedQuadratic => {
            (z - alpha).abs() > 1e-3
        }
        _ => true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kappas_match_differentiated_penalty(
        family in prop::sample::select(PenaltyFamily::ALL.to_vec()),
        alpha in 0.2f64..5.0,
        z in 0.05f64..10.0,
    ) {
        let kind = PenaltyKind::new(family, alpha).unwrap();
        let h = 1e-6 * z.max(1.0);
        let h2 = 1e-4 * z.max(1.0);
        // The whole stencil stays on one side of the branch point.
        prop_assume!(branch_free(family, alpha, z - h2) && branch_free(family, alpha, z + h2));
        let d1 = (kind.phi(z + h) - kind.phi(z - h)) / (2.0 * h);
        let d2 = (kind.phi(z + h2) - 2.0 * kind.phi(z) + kind.phi(z - h2)) / (h2 * h2);
        let k = kind.kappa(z);
        let k1 = d1 / z;
        let k2 = (d2 - k1) / (z * z);
        // Round-off floors of the two difference quotients.
        let eps = f64::EPSILON * (1.0 + kind.phi(z).abs());
        let noise1 = 10.0 * eps / h / z;
        let noise2 = (10.0 * eps / (h2 * h2) + noise1) / (z * z);
        prop_assert!((k.kappa1 - k1).abs() <= 1e-4 * k.kappa1.abs() + noise1,
            "kappa1 {} vs {}", k.kappa1, k1);
        prop_assert!((k.kappa2 - k2).abs() <= 1e-4 * k.kappa2.abs() + noise2,
            "kappa2 {} vs {}", k.kappa2, k2);
    }

    #[test]
    fn linear_maps_are_recovered_exactly(
        a in prop::collection::vec(-64i32..64, 12),
        x in prop::collection::vec(-64i32..64, 4),
        v in prop::collection::vec(-8i32..8, 3),
        k in 10i32..24,
    ) {
        // Small-integer data and a dyadic step keep every operation exact.
        let a: Vec<f64> = a.iter().map(|&t| t as f64 / 8.0).collect();
        let x: Vec<f64> = x.iter().map(|&t| t as f64 / 4.0).collect();
        let v: Vec<f64> = v.iter().map(|&t| t as f64).collect();
        let step = 2f64.powi(-k);
        let f = |x: &[f64]| Ok((0..3).map(|r| dot(&a[r * 4..(r + 1) * 4], x)).collect::<Vec<_>>());
        let g = fd_vjp(f, &x, &v, FdStep::Absolute(step)).unwrap();
        let norm = a.iter().map(|t| t * t).sum::<f64>().sqrt();
        for j in 0..4 {
            let exact: f64 = (0..3).map(|r| v[r] * a[r * 4 + j]).sum();
            prop_assert!((g[j] - exact).abs() <= 1e-12 * norm);
        }
    }

    #[test]
    fn negated_direction_negates_result(
        x in prop::collection::vec(-3.0f64..3.0, 1..6),
        v in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let f = |x: &[f64]| Ok(vec![x.iter().map(|t| t.sin()).sum::<f64>(), x.iter().map(|t| t * t * t).product()]);
        let g = fd_vjp(f, &x, &v, FdStep::default()).unwrap();
        let neg: Vec<f64> = v.iter().map(|t| -t).collect();
        let gn = fd_vjp(f, &x, &neg, FdStep::default()).unwrap();
        for (a, b) in g.iter().zip(&gn) {
            prop_assert_eq!(*a, -*b);
        }
    }
}

#[test]
fn pooling_point_set_layout() {
    let x =
        PointSet::<f64>::from_points(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    assert_eq!(x.as_slice(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
}
