//! Benchmark harness for the pooling and transport nodes.
//!
//! [`run_bench`] generates a seeded instance, times the forward pass and each requested
//! backward method, and measures tracked workspace bytes. [`write_csv`] writes the
//! records in a fixed column order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ddn_core::{
    fd_vjp, ot_backward, ot_forward, pool_backward, pool_forward, pool_jacobian_naive,
    BackwardMethod, FdStep, OtBackwardOptions, PenaltyKind, PointSet, PoolBackwardOptions,
    PoolOptions, Real, SinkhornOptions, TransportPlan, TransportProblem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use ddn_core::track_workspace;

pub const CSV_HEADER: &str = "node,method,penalty,gamma,batch,m,n,iterations,repeats,seed,\
time_forward_ns,time_backward_ns,peak_bytes_forward,peak_bytes_backward,converged";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(#[from] ddn_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Solver(_) => 2,
            BenchError::Config(_) | BenchError::Io(_) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Pooling,
    Ot,
}

impl Node {
    pub fn name(self) -> &'static str {
        match self {
            Node::Pooling => "pooling",
            Node::Ot => "ot",
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Node {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pooling" | "pool" => Ok(Node::Pooling),
            "ot" | "sinkhorn" => Ok(Node::Ot),
            _ => Err(BenchError::Config(format!("unknown node {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Pooling: the `m x m` solve. Transport: the Schur-complement block solve.
    Structured,
    /// Transport only: Cholesky of the whole `(m + n - 1)`-square system.
    FullInverse,
    /// Transport only: reverse sweep through the recorded Sinkhorn iterations.
    Unrolled,
    /// Pooling only: materialise the full Jacobian, then contract.
    NaiveJacobian,
    /// Central differences of the forward pass.
    Fd,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Structured,
        Method::FullInverse,
        Method::Unrolled,
        Method::NaiveJacobian,
        Method::Fd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Structured => "structured",
            Method::FullInverse => "full-inverse",
            Method::Unrolled => "unrolled",
            Method::NaiveJacobian => "naive-jacobian",
            Method::Fd => "fd",
        }
    }

    pub fn valid_for(self, node: Node) -> bool {
        match node {
            Node::Pooling => matches!(
                self,
                Method::Structured | Method::NaiveJacobian | Method::Fd
            ),
            Node::Ot => matches!(
                self,
                Method::Structured | Method::FullInverse | Method::Unrolled | Method::Fd
            ),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| BenchError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub node: Node,
    pub methods: Vec<Method>,
    /// Pooling only.
    pub penalty: PenaltyKind,
    /// Transport only.
    pub gamma: f64,
    pub batch: usize,
    pub m: usize,
    pub n: usize,
    /// Pooling: L-BFGS iteration cap (0 for the default 500). Transport: a fixed
    /// Sinkhorn iteration count, or 0 to iterate to a `1e-9` marginal residual.
    pub iterations: usize,
    pub repeats: usize,
    pub seed: u64,
    pub out_path: Option<PathBuf>,
    pub log_domain: bool,
    pub float32: bool,
    pub parallel_batch: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            node: Node::Pooling,
            methods: vec![Method::Structured],
            penalty: PenaltyKind::quadratic(),
            gamma: 10.0,
            batch: 1,
            m: 8,
            n: 64,
            iterations: 0,
            repeats: 3,
            seed: 0,
            out_path: None,
            log_domain: false,
            float32: false,
            parallel_batch: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        for &method in &self.methods {
            if !method.valid_for(self.node) {
                return bad(format!(
                    "method {method} does not apply to node {}",
                    self.node
                ));
            }
            if method == Method::Fd && self.float32 {
                return bad("finite differences run in double precision only".into());
            }
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.batch == 0 || self.m == 0 || self.n == 0 {
            return bad("batch, m and n must be positive".into());
        }
        if self.node == Node::Ot && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.log_domain && self.methods.contains(&Method::Unrolled) {
            return bad("the unrolled method records linear-domain iterations".into());
        }
        Ok(())
    }

    fn penalty_label(&self) -> String {
        match self.node {
            Node::Pooling => self.penalty.family().name().to_string(),
            Node::Ot => "none".to_string(),
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub node: Node,
    pub method: Method,
    pub penalty: String,
    pub gamma: f64,
    pub batch: usize,
    pub m: usize,
    pub n: usize,
    pub iterations: usize,
    pub repeats: usize,
    pub seed: u64,
    pub time_forward_ns: u64,
    pub time_backward_ns: u64,
    pub peak_bytes_forward: usize,
    pub peak_bytes_backward: usize,
    pub converged: bool,
}

/// A record together with the gradient its backward pass produced.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRun {
    pub record: BenchRecord,
    /// Pooling: `dJ/dx`. Transport: `dJ/dM` (followed by `dJ/dr` and `dJ/dc` for the
    /// implicit and unrolled methods).
    pub gradient: Vec<f64>,
}

/// Runs every configured method and returns one record per method.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    Ok(run_bench_detailed(cfg)?
        .into_iter()
        .map(|r| r.record)
        .collect())
}

pub fn run_bench_detailed(cfg: &BenchConfig) -> Result<Vec<BenchRun>, BenchError> {
    cfg.validate()?;
    if cfg.parallel_batch {
        log::info!("per-batch parallelism on: times measure throughput and workspace covers the calling thread only");
    }
    match (cfg.node, cfg.float32) {
        (Node::Pooling, false) => bench_pooling::<f64>(cfg),
        (Node::Pooling, true) => bench_pooling::<f32>(cfg),
        (Node::Ot, false) => bench_ot::<f64>(cfg),
        (Node::Ot, true) => bench_ot::<f32>(cfg),
    }
}

fn cast<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::lit).collect()
}

/// Standard-normal points and an incoming gradient, both from `seed`.
pub fn pooling_instance(cfg: &BenchConfig) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, m, n) = (cfg.batch, cfg.m, cfg.n);
    let x: Vec<f64> = (0..b * m * n).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..b * m).map(|_| rng.sample(StandardNormal)).collect();
    (x, v)
}

/// Uniform `[0, 1)` costs, uniform marginals and a standard-normal `dJ/dP`.
pub fn ot_instance(cfg: &BenchConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, m, n) = (cfg.batch, cfg.m, cfg.n);
    let cost: Vec<f64> = (0..b * m * n).map(|_| rng.random::<f64>()).collect();
    let v: Vec<f64> = (0..b * m * n).map(|_| rng.sample(StandardNormal)).collect();
    (
        cost,
        vec![1.0 / m as f64; b * m],
        vec![1.0 / n as f64; b * n],
        v,
    )
}

fn median(mut ns: Vec<u64>) -> u64 {
    ns.sort_unstable();
    ns[ns.len() / 2]
}

/// One untimed warm-up, then the median of `repeats` timed runs.
fn time_median<R>(
    repeats: usize,
    mut f: impl FnMut() -> Result<R, BenchError>,
) -> Result<u64, BenchError> {
    f()?;
    let mut ns = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = f()?;
        ns.push(start.elapsed().as_nanos() as u64);
        drop(out);
    }
    Ok(median(ns))
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn record(cfg: &BenchConfig, method: Method) -> BenchRecord {
    BenchRecord {
        node: cfg.node,
        method,
        penalty: cfg.penalty_label(),
        gamma: cfg.gamma,
        batch: cfg.batch,
        m: cfg.m,
        n: cfg.n,
        iterations: cfg.iterations,
        repeats: cfg.repeats,
        seed: cfg.seed,
        time_forward_ns: 0,
        time_backward_ns: 0,
        peak_bytes_forward: 0,
        peak_bytes_backward: 0,
        converged: false,
    }
}

fn bench_pooling<T: Real>(cfg: &BenchConfig) -> Result<Vec<BenchRun>, BenchError> {
    let (b, m, n) = (cfg.batch, cfg.m, cfg.n);
    let (x64, v64) = pooling_instance(cfg);
    let x = PointSet::new(b, m, n, cast::<T>(x64.clone()))?;
    let v: Vec<T> = cast(v64.clone());
    let kind = cfg.penalty;
    let fopts = PoolOptions {
        // Single precision cannot resolve the default 1e-10.
        tol: 1e-10f64.max(100.0 * T::epsilon().as_f64()),
        max_iter: if cfg.iterations == 0 {
            500
        } else {
            cfg.iterations
        },
        parallel: cfg.parallel_batch,
        ..Default::default()
    };
    let bopts = PoolBackwardOptions {
        parallel: cfg.parallel_batch,
        ..Default::default()
    };

    let (res, peak_fwd) = track_workspace(|| pool_forward(&x, &kind, &fopts));
    let res = res?;
    let time_fwd = time_median(cfg.repeats, || Ok(pool_forward(&x, &kind, &fopts)?))?;
    let converged = res.converged.iter().all(|&c| c);
    let y = &res.y;
    let retained = y.bytes();

    let mut runs = Vec::new();
    for &method in &cfg.methods {
        let backward = || -> Result<Vec<f64>, BenchError> {
            Ok(match method {
                Method::Structured => to_f64(&pool_backward(&x, y, &kind, &v, &bopts)?),
                Method::NaiveJacobian => {
                    let jac = pool_jacobian_naive(&x, y, &kind, &bopts)?;
                    let mut g = vec![0.0; b * m * n];
                    for bi in 0..b {
                        for k in 0..m {
                            let vk = v[bi * m + k].as_f64();
                            let block = &jac[(bi * m + k) * m * n..(bi * m + k + 1) * m * n];
                            for (gi, &jv) in g[bi * m * n..(bi + 1) * m * n].iter_mut().zip(block) {
                                *gi += vk * jv.as_f64();
                            }
                        }
                    }
                    g
                }
                Method::Fd => {
                    let forward = |data: &[f64]| {
                        let xs = PointSet::new(b, m, n, data.to_vec())?;
                        Ok(pool_forward(&xs, &kind, &fopts)?.y.into_vec())
                    };
                    fd_vjp(forward, &x64, &v64, FdStep::default())?
                }
                _ => unreachable!("validated"),
            })
        };
        let (gradient, peak_bwd) = track_workspace(&backward);
        let gradient = gradient?;
        let time_bwd = time_median(cfg.repeats, &backward)?;
        let mut rec = record(cfg, method);
        rec.time_forward_ns = time_fwd;
        rec.time_backward_ns = time_bwd;
        rec.peak_bytes_forward = peak_fwd;
        rec.peak_bytes_backward = retained + peak_bwd;
        rec.converged = converged;
        runs.push(BenchRun {
            record: rec,
            gradient,
        });
    }
    Ok(runs)
}

/// `1e-9`, or what single precision can resolve for marginals of size `1 / max(m, n)`.
fn ot_tolerance<T: Real>(cfg: &BenchConfig) -> f64 {
    1e-9f64.max(100.0 * T::epsilon().as_f64() / cfg.m.max(cfg.n) as f64)
}

fn sinkhorn_options<T: Real>(cfg: &BenchConfig, record_tape: bool) -> SinkhornOptions {
    let (tol, max_iter) = if cfg.iterations == 0 {
        (ot_tolerance::<T>(cfg), 10_000)
    } else {
        (0.0, cfg.iterations)
    };
    SinkhornOptions {
        tol,
        max_iter,
        log_domain: cfg.log_domain,
        record_tape,
        parallel: cfg.parallel_batch,
        ..Default::default()
    }
}

fn bench_ot<T: Real>(cfg: &BenchConfig) -> Result<Vec<BenchRun>, BenchError> {
    let (b, m, n) = (cfg.batch, cfg.m, cfg.n);
    let (cost, r, c, v64) = ot_instance(cfg);
    let prob = TransportProblem::new(
        b,
        m,
        n,
        cast::<T>(cost.clone()),
        cast::<T>(r.clone()),
        cast::<T>(c.clone()),
        cfg.gamma,
    )?;
    let v: Vec<T> = cast(v64.clone());
    let bopts = OtBackwardOptions {
        parallel: cfg.parallel_batch,
        ..Default::default()
    };

    let mut runs = Vec::new();
    for &method in &cfg.methods {
        let record_tape = method == Method::Unrolled;
        let fopts = sinkhorn_options::<T>(cfg, record_tape);
        let (plan, peak_fwd) = track_workspace(|| ot_forward(&prob, &fopts));
        let plan: TransportPlan<T> = plan?;
        let time_fwd = time_median(cfg.repeats, || Ok(ot_forward(&prob, &fopts)?))?;
        // With a fixed iteration count there is no tolerance to meet; report whether
        // the default one was reached.
        let converged = plan.max_residual() <= ot_tolerance::<T>(cfg);

        let backward = || -> Result<Vec<f64>, BenchError> {
            let structured = |bm: BackwardMethod| -> Result<Vec<f64>, BenchError> {
                let g = ot_backward(&prob, &plan, &v, bm, &bopts)?;
                let mut out = to_f64(&g.dj_dm);
                out.extend(to_f64(&g.dj_dr));
                out.extend(to_f64(&g.dj_dc));
                Ok(out)
            };
            match method {
                Method::Structured => structured(BackwardMethod::StructuredBlock),
                Method::FullInverse => structured(BackwardMethod::StructuredFull),
                Method::Unrolled => structured(BackwardMethod::Unrolled),
                Method::Fd => {
                    let inner = SinkhornOptions {
                        record_tape: false,
                        ..fopts
                    };
                    let forward = |data: &[f64]| {
                        let p = TransportProblem::new(
                            b,
                            m,
                            n,
                            data.to_vec(),
                            r.clone(),
                            c.clone(),
                            cfg.gamma,
                        )?;
                        Ok(ot_forward(&p, &inner)?.p.into_vec())
                    };
                    Ok(fd_vjp(forward, &cost, &v64, FdStep::default())?)
                }
                _ => unreachable!("validated"),
            }
        };
        let (gradient, peak_bwd) = track_workspace(&backward);
        let gradient = gradient?;
        let time_bwd = time_median(cfg.repeats, &backward)?;
        let mut rec = record(cfg, method);
        rec.time_forward_ns = time_fwd;
        rec.time_backward_ns = time_bwd;
        rec.peak_bytes_forward = peak_fwd;
        rec.peak_bytes_backward = plan.retained_bytes() + peak_bwd;
        rec.converged = converged;
        runs.push(BenchRun {
            record: rec,
            gradient,
        });
    }
    Ok(runs)
}

fn csv_row(r: &BenchRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.node,
        r.method,
        r.penalty,
        r.gamma,
        r.batch,
        r.m,
        r.n,
        r.iterations,
        r.repeats,
        r.seed,
        r.time_forward_ns,
        r.time_backward_ns,
        r.peak_bytes_forward,
        r.peak_bytes_backward,
        r.converged
    )
}

/// Header plus one line per record, newline terminated.
pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&csv_row(r));
        s.push('\n');
    }
    s
}

pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<(), BenchError> {
    if records.is_empty() {
        return Err(BenchError::Config("no records to write".into()));
    }
    fs::write(path, to_csv(records))?;
    Ok(())
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}
