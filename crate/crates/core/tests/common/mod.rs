#![allow(dead_code)]

use ddn_core::{PointSet, TransportProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn normal_points(seed: u64, batch: usize, m: usize, n: usize) -> PointSet {
    let mut r = rng(seed);
    PointSet::new(batch, m, n, normal_vec(&mut r, batch * m * n)).unwrap()
}

/// Positive weights normalised per block of `len`.
pub fn simplex(rng: &mut ChaCha8Rng, batch: usize, len: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..batch * len)
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    for block in w.chunks_mut(len) {
        let s: f64 = block.iter().sum();
        block.iter_mut().for_each(|x| *x /= s);
    }
    w
}

/// Uniform `[0, scale)` costs with random (non-uniform) marginals.
pub fn transport(
    seed: u64,
    batch: usize,
    m: usize,
    n: usize,
    gamma: f64,
    scale: f64,
) -> TransportProblem {
    let mut r = rng(seed);
    let cost: Vec<f64> = (0..batch * m * n)
        .map(|_| scale * r.random::<f64>())
        .collect();
    let rr = simplex(&mut r, batch, m);
    let cc = simplex(&mut r, batch, n);
    TransportProblem::new(batch, m, n, cost, rr, cc, gamma).unwrap()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |w, (x, y)| w.max((x - y).abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
