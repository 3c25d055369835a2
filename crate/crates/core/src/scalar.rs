//! Floating-point element trait shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Element type of every buffer in the crate. Implemented for `f64` (the default
/// everywhere) and `f32` (benchmark mode only).
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dot product with four independent accumulators.
///
/// The summation order is fixed, so results are reproducible for a given length.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `[a0.b0, a0.b1, a1.b0, a1.b1]`, sharing every load between two products.
#[inline]
pub fn dot2x2<T: Real>(a0: &[T], a1: &[T], b0: &[T], b1: &[T]) -> [T; 4] {
    let n = a0.len().min(a1.len()).min(b0.len()).min(b1.len());
    let mut acc = [[T::zero(); 4]; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        for l in 0..4 {
            let i = 4 * k + l;
            let (x0, x1, y0, y1) = (a0[i], a1[i], b0[i], b1[i]);
            acc[0][l] += x0 * y0;
            acc[1][l] += x0 * y1;
            acc[2][l] += x1 * y0;
            acc[3][l] += x1 * y1;
        }
    }
    let mut out = [T::zero(); 4];
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (a[0] + a[1]) + (a[2] + a[3]);
    }
    for i in 4 * chunks..n {
        out[0] += a0[i] * b0[i];
        out[1] += a0[i] * b1[i];
        out[2] += a1[i] * b0[i];
        out[3] += a1[i] * b1[i];
    }
    out
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn max_abs<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}
