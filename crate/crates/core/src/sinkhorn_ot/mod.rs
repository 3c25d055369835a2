//! Entropy regularised optimal transport.
//!
//! ```text
//! P = argmin_{P >= 0} <P, M> + (1/gamma) KL(P || r c^T)   s.t.  P 1 = r,  P^T 1 = c
//! ```
//!
//! Larger `gamma` means weaker regularisation and sharper plans.
//!
//! The forward pass is Sinkhorn's alternating row and column scaling, in the linear
//! or the log domain. The implicit backward pass drops the first row constraint (the
//! `m + n` marginal constraints are linearly dependent) and applies the inverse of
//!
//! ```text
//! A H^-1 A^T = gamma [ diag(P_{2:m} 1)   P_{2:m}       ]
//!                    [ P_{2:m}^T         diag(P^T 1)   ]
//! ```
//!
//! either through a Schur complement of the smaller diagonal block
//! ([`BackwardMethod::StructuredBlock`]) or by factoring the whole
//! `(m + n - 1)`-square matrix ([`BackwardMethod::StructuredFull`]).
//! [`BackwardMethod::Unrolled`] instead differentiates through the recorded Sinkhorn
//! iterates. Marginal gradients follow the dropped-constraint convention
//! `dJ/dr_1 = 0`.

mod backward;
mod forward;
mod unrolled;

pub use backward::{assemble_ahinv_at, ot_backward, simplex_reparam_vjp};
pub use forward::ot_forward;
pub use unrolled::SinkhornTape;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::workspace::Buf;

/// `b` transport problems of shape `m x n` sharing one `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem<T = f64> {
    batch: usize,
    m: usize,
    n: usize,
    cost: Buf<T>,
    r: Buf<T>,
    c: Buf<T>,
    gamma: f64,
}

impl<T: Real> TransportProblem<T> {
    /// Validates shapes, positivity and normalisation (`1^T r = 1^T c = 1`).
    pub fn new(
        batch: usize,
        m: usize,
        n: usize,
        cost: Vec<T>,
        r: Vec<T>,
        c: Vec<T>,
        gamma: f64,
    ) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidInput("transport needs m, n >= 1".into()));
        }
        if cost.len() != batch * m * n || r.len() != batch * m || c.len() != batch * n {
            return Err(Error::dims(
                format!("M {batch}x{m}x{n}, r {batch}x{m}, c {batch}x{n}"),
                format!("M {}, r {}, c {}", cost.len(), r.len(), c.len()),
            ));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if cost.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        if r.iter()
            .chain(&c)
            .any(|&v| !(v > T::zero()) || !v.is_finite())
        {
            return Err(Error::InvalidInput(
                "marginals must be strictly positive".into(),
            ));
        }
        for (name, vals, len) in [("r", &r, m), ("c", &c, n)] {
            let tol = 1e-12f64.max(4.0 * len as f64 * T::epsilon().as_f64());
            for b in 0..batch {
                let s: f64 = vals[b * len..(b + 1) * len]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::InvalidInput(format!(
                        "marginal {name} of batch {b} sums to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(TransportProblem {
            batch,
            m,
            n,
            cost: Buf::from_vec(cost),
            r: Buf::from_vec(r),
            c: Buf::from_vec(c),
            gamma,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cost(&self) -> &[T] {
        &self.cost
    }

    pub fn r(&self) -> &[T] {
        &self.r
    }

    pub fn c(&self) -> &[T] {
        &self.c
    }

    pub fn cost_element(&self, b: usize) -> &[T] {
        &self.cost[b * self.m * self.n..(b + 1) * self.m * self.n]
    }

    pub fn r_element(&self, b: usize) -> &[T] {
        &self.r[b * self.m..(b + 1) * self.m]
    }

    pub fn c_element(&self, b: usize) -> &[T] {
        &self.c[b * self.n..(b + 1) * self.n]
    }
}

/// Result of [`ot_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T = f64> {
    pub(crate) batch: usize,
    pub(crate) m: usize,
    pub(crate) n: usize,
    /// Coupling, `b x m x n`.
    pub p: Buf<T>,
    /// Max marginal violation `max(|P1 - r|_inf, |P^T 1 - c|_inf)` per batch element.
    pub residual: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    /// Whether each element was solved in the log domain.
    pub log_domain: Vec<bool>,
    /// Recorded iterates for the unrolled backward pass.
    pub tape: Option<SinkhornTape<T>>,
}

impl<T: Real> TransportPlan<T> {
    pub fn element(&self, b: usize) -> &[T] {
        &self.p[b * self.m * self.n..(b + 1) * self.m * self.n]
    }

    pub fn max_residual(&self) -> f64 {
        self.residual.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// Bytes kept alive between the forward and backward passes: the plan itself and,
    /// when recorded, the Sinkhorn tape.
    pub fn retained_bytes(&self) -> usize {
        self.p.bytes() + self.tape.as_ref().map_or(0, SinkhornTape::bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornOptions {
    /// Stop once the max marginal residual is at most `tol`. Zero runs exactly
    /// `max_iter` iterations.
    pub tol: f64,
    pub max_iter: usize,
    pub log_domain: bool,
    /// Fall back to the log domain when the linear-domain kernel underflows.
    pub auto_log_domain: bool,
    /// Record every iterate for [`BackwardMethod::Unrolled`]. Forces the linear domain.
    pub record_tape: bool,
    pub parallel: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            tol: 1e-9,
            max_iter: 10_000,
            log_domain: false,
            auto_log_domain: true,
            record_tape: false,
            parallel: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackwardMethod {
    StructuredBlock,
    StructuredFull,
    Unrolled,
}

impl BackwardMethod {
    pub fn name(self) -> &'static str {
        match self {
            BackwardMethod::StructuredBlock => "structured-block",
            BackwardMethod::StructuredFull => "structured-full",
            BackwardMethod::Unrolled => "unrolled",
        }
    }
}

impl fmt::Display for BackwardMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackwardMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "structured-block" | "block" | "structured" => Ok(BackwardMethod::StructuredBlock),
            "structured-full" | "full" | "full-inverse" => Ok(BackwardMethod::StructuredFull),
            "unrolled" => Ok(BackwardMethod::Unrolled),
            _ => Err(Error::InvalidInput(format!(
                "unknown OT backward method {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtBackwardOptions {
    /// Added to the diagonal of the factored Schur complement (or of the full
    /// `A H^-1 A^T` for [`BackwardMethod::StructuredFull`]).
    pub regularization: f64,
    pub parallel: bool,
}

impl Default for OtBackwardOptions {
    fn default() -> Self {
        OtBackwardOptions {
            regularization: 0.0,
            parallel: false,
        }
    }
}

/// Gradients of a scalar loss with respect to the transport inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OtGradients<T = f64> {
    /// `b x m x n`
    pub dj_dm: Buf<T>,
    /// `b x m`; the first entry of every batch element is zero.
    pub dj_dr: Buf<T>,
    /// `b x n`
    pub dj_dc: Buf<T>,
}
