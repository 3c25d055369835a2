//! Robust penalty functions and their Hessian coefficients.
//!
//! For a penalty `phi(z; alpha)` of a non-negative distance `z`, the pooling Hessian
//! contribution of one point is `kappa1(z) I + kappa2(z) (y - x)(y - x)^T` with
//!
//! ```text
//! kappa1(z) = phi'(z) / z
//! kappa2(z) = (phi''(z) - kappa1(z)) / z^2
//! ```
//!
//! At `z = 0` both coefficients are returned as their analytic limits.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PenaltyFamily {
    Quadratic,
    PseudoHuber,
    Huber,
    Welsch,
    TruncatedQuadratic,
}

impl PenaltyFamily {
    pub const ALL: [PenaltyFamily; 5] = [
        PenaltyFamily::Quadratic,
        PenaltyFamily::PseudoHuber,
        PenaltyFamily::Huber,
        PenaltyFamily::Welsch,
        PenaltyFamily::TruncatedQuadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyFamily::Quadratic => "quadratic",
            PenaltyFamily::PseudoHuber => "pseudo-huber",
            PenaltyFamily::Huber => "huber",
            PenaltyFamily::Welsch => "welsch",
            PenaltyFamily::TruncatedQuadratic => "trunc-quad",
        }
    }
}

impl fmt::Display for PenaltyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        PenaltyFamily::ALL
            .into_iter()
            .find(|p| p.name() == lower)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown penalty {s:?}; expected one of quadratic, pseudo-huber, huber, \
                     welsch, trunc-quad"
                ))
            })
    }
}

/// A penalty family together with its scale parameter `alpha > 0`.
///
/// `alpha` is carried for every family; the quadratic penalty ignores it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyKind {
    family: PenaltyFamily,
    alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaPair<T = f64> {
    pub kappa1: T,
    pub kappa2: T,
}

impl PenaltyKind {
    pub fn new(family: PenaltyFamily, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "penalty alpha must be positive and finite, got {alpha}"
            )));
        }
        Ok(PenaltyKind { family, alpha })
    }

    pub fn quadratic() -> Self {
        PenaltyKind {
            family: PenaltyFamily::Quadratic,
            alpha: 1.0,
        }
    }

    pub fn family(&self) -> PenaltyFamily {
        self.family
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// True when `kappa2` vanishes identically, enabling the diagonal-Hessian backward.
    pub fn has_zero_kappa2(&self) -> bool {
        matches!(
            self.family,
            PenaltyFamily::Quadratic | PenaltyFamily::TruncatedQuadratic
        )
    }

    pub fn is_convex(&self) -> bool {
        matches!(
            self.family,
            PenaltyFamily::Quadratic | PenaltyFamily::PseudoHuber | PenaltyFamily::Huber
        )
    }

    /// Penalty value for a non-negative distance.
    pub fn phi<T: Real>(&self, z: T) -> T {
        let z = z.abs();
        let a = T::lit(self.alpha);
        let half = T::lit(0.5);
        match self.family {
            PenaltyFamily::Quadratic => half * z * z,
            PenaltyFamily::PseudoHuber => {
                let s = z / a;
                a * a * ((T::one() + s * s).sqrt() - T::one())
            }
            PenaltyFamily::Huber => {
                if z <= a {
                    half * z * z
                } else {
                    a * (z - half * a)
                }
            }
            PenaltyFamily::Welsch => T::one() - (-(z * z) / (T::lit(2.0) * a * a)).exp(),
            PenaltyFamily::TruncatedQuadratic => {
                if z <= a {
                    half * z * z
                } else {
                    half * a * a
                }
            }
        }
    }

    /// Returns `(kappa1, kappa2)` at `z`.
    pub fn kappa<T: Real>(&self, z: T) -> KappaPair<T> {
        let z = z.abs();
        let a = T::lit(self.alpha);
        let (kappa1, kappa2) = match self.family {
            PenaltyFamily::Quadratic => (T::one(), T::zero()),
            PenaltyFamily::PseudoHuber => {
                let s = z / a;
                let q = T::one() + s * s;
                let k1 = T::one() / q.sqrt();
                (k1, -k1 / (q * a * a))
            }
            PenaltyFamily::Huber => {
                if z <= a {
                    (T::one(), T::zero())
                } else {
                    (a / z, -a / (z * z * z))
                }
            }
            PenaltyFamily::Welsch => {
                let a2 = a * a;
                let e = (-(z * z) / (T::lit(2.0) * a2)).exp();
                (e / a2, -e / (a2 * a2))
            }
            PenaltyFamily::TruncatedQuadratic => {
                if z <= a {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), T::zero())
                }
            }
        };
        KappaPair { kappa1, kappa2 }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(alpha={})", self.family, self.alpha)
    }
}
