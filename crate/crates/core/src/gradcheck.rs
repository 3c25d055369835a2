//! Central-difference vector-Jacobian products and a comparison report.
//!
//! When checking an implicit backward pass, solve the forward problem inside
//! `forward` to a tight tolerance (`1e-12` or better): the differences see the
//! solver's output, not the exact solution map.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Per-coordinate step: absolute, or relative to `max(1, |x_i|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdStep {
    Absolute(f64),
    Relative(f64),
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep::Relative(1e-6)
    }
}

impl FdStep {
    fn at(self, xi: f64) -> f64 {
        match self {
            FdStep::Absolute(s) => s,
            FdStep::Relative(s) => s * xi.abs().max(1.0),
        }
    }

    fn validate(self) -> Result<()> {
        let s = match self {
            FdStep::Absolute(s) | FdStep::Relative(s) => s,
        };
        if s > 0.0 && s.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "difference step must be positive, got {s}"
            )))
        }
    }
}

fn probe<F>(forward: &F, x: &[f64], v: &[f64], i: usize, step: FdStep) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let h = step.at(x[i]);
    let mut xs = x.to_vec();
    let mut side = |delta: f64| -> Result<f64> {
        xs[i] = x[i] + delta;
        let y = forward(&xs)?;
        if y.len() != v.len() {
            return Err(Error::dims(
                format!("output of length {}", v.len()),
                y.len(),
            ));
        }
        if y.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("forward output at probe {i}")));
        }
        Ok(y.iter().zip(v).map(|(a, b)| a * b).sum())
    };
    // Divide by the spacing actually realised in floating point.
    let span = (x[i] + h) - (x[i] - h);
    let plus = side(h)?;
    let minus = side(-h)?;
    Ok((plus - minus) / span)
}

/// `g_i = (<v, f(x + h e_i)> - <v, f(x - h e_i)>) / 2h`.
pub fn fd_vjp<F>(forward: F, x: &[f64], v: &[f64], step: FdStep) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    step.validate()?;
    (0..x.len())
        .map(|i| probe(&forward, x, v, i, step))
        .collect()
}

/// [`fd_vjp`] with coordinates probed in parallel; `forward` must be pure.
pub fn fd_vjp_parallel<F>(forward: F, x: &[f64], v: &[f64], step: FdStep) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    step.validate()?;
    (0..x.len())
        .into_par_iter()
        .map(|i| probe(&forward, x, v, i, step))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VjpReport {
    pub max_abs_err: f64,
    /// `max |a - b| / (|b| + atol / rtol)`; plain relative error when `atol = 0`.
    pub max_rel_err: f64,
    /// Every coordinate satisfies `|a - b| <= atol + rtol |b|`.
    pub passed: bool,
    pub per_coordinate: Option<Vec<f64>>,
}

/// Compares an analytic VJP against a numeric reference `numeric`.
pub fn compare_vjp(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> Result<VjpReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::dims(numeric.len(), analytic.len()));
    }
    if !(rtol >= 0.0 && atol >= 0.0) {
        return Err(Error::InvalidInput(
            "tolerances must be non-negative".into(),
        ));
    }
    let floor = if rtol > 0.0 { atol / rtol } else { 0.0 };
    let mut report = VjpReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        passed: true,
        per_coordinate: Some(Vec::with_capacity(analytic.len())),
    };
    for (&a, &b) in analytic.iter().zip(numeric) {
        let err = (a - b).abs();
        let denom = b.abs() + floor;
        let rel = if err == 0.0 {
            0.0
        } else if denom > 0.0 {
            err / denom
        } else {
            f64::INFINITY
        };
        report.max_abs_err = report.max_abs_err.max(err);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.passed &= err <= atol + rtol * b.abs();
        if let Some(pc) = report.per_coordinate.as_mut() {
            pc.push(err);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map() {
        let x = [0.5, -2.0, 7.0];
        let v = [1.0, 2.0, -3.0];
        let g = fd_vjp(
            |x| Ok(x.iter().map(|t| 3.0 * t).collect()),
            &x,
            &v,
            FdStep::default(),
        )
        .unwrap();
        for (gi, vi) in g.iter().zip(&v) {
            assert!((gi - 3.0 * vi).abs() < 1e-8 * vi.abs());
        }
    }

    #[test]
    fn mean_of_points() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let v = [0.7, -0.2];
        // Three points in R^2, stored point-major.
        let mean = |x: &[f64]| Ok(vec![(x[0] + x[2] + x[4]) / 3.0, (x[1] + x[3] + x[5]) / 3.0]);
        let g = fd_vjp(mean, &x, &v, FdStep::default()).unwrap();
        for (i, gi) in g.iter().enumerate() {
            assert!((gi - v[i % 2] / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compare_examples() {
        let r = compare_vjp(&[1.0, 2.0], &[1.0, 2.0], 1e-5, 0.0).unwrap();
        assert!(r.passed && r.max_abs_err == 0.0 && r.max_rel_err == 0.0);
        assert!(
            compare_vjp(&[1.0], &[1.0 + 1e-9], 1e-5, 0.0)
                .unwrap()
                .passed
        );
        let r = compare_vjp(&[1.0], &[1.1], 1e-5, 0.0).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_err - 0.1 / 1.1).abs() < 1e-12);
        assert!(compare_vjp(&[1.0], &[1.0, 2.0], 1e-5, 0.0).is_err());
    }

    #[test]
    fn non_finite_probe() {
        let r = fd_vjp(
            |x| Ok(vec![1.0 / (x[0] - 1e-7).max(0.0)]),
            &[0.0],
            &[1.0],
            FdStep::Absolute(1e-6),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(fd_vjp(|x| Ok(x.to_vec()), &[0.0], &[1.0], FdStep::Absolute(0.0)).is_err());
    }

    #[test]
    fn parallel_matches_serial() {
        let f = |x: &[f64]| Ok(vec![x[0] * x[1], x[1].sin(), x[2].exp()]);
        let x = [0.3, 1.2, -0.4];
        let v = [1.0, -0.5, 2.0];
        let a = fd_vjp(f, &x, &v, FdStep::default()).unwrap();
        let b = fd_vjp_parallel(f, &x, &v, FdStep::default()).unwrap();
        assert_eq!(a, b);
    }
}
