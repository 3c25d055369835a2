use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ddn_cli::{run_bench, to_csv, write_csv, BenchConfig, BenchError, Method, Node};
use ddn_core::{PenaltyFamily, PenaltyKind};

/// Time and workspace profiles of the forward and backward passes, as CSV.
#[derive(Debug, Parser)]
#[command(name = "ddn-bench", version)]
struct Args {
    /// pooling | ot
    #[arg(long, default_value = "pooling")]
    node: String,
    /// Comma-separated: structured, full-inverse, unrolled, naive-jacobian, fd.
    #[arg(long, default_value = "structured")]
    method: String,
    /// quadratic, pseudo-huber, huber, welsch or trunc-quad (pooling only).
    #[arg(long, default_value = "quadratic")]
    penalty: String,
    /// Penalty threshold alpha (pooling only).
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Inverse regularisation strength (ot only).
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Pooling: L-BFGS cap (0 = 500). ot: fixed Sinkhorn iterations (0 = run to 1e-9).
    #[arg(long, default_value_t = 0)]
    iterations: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run Sinkhorn in the log domain.
    #[arg(long)]
    log_domain: bool,
    /// Single-precision forward and backward passes.
    #[arg(long)]
    float32: bool,
    /// Parallelise over the batch; times then measure throughput, not latency.
    #[arg(long)]
    parallel_batch: bool,
}

fn config(args: Args) -> Result<BenchConfig, BenchError> {
    let family: PenaltyFamily = args
        .penalty
        .parse()
        .map_err(|e: ddn_core::Error| BenchError::Config(e.to_string()))?;
    let penalty =
        PenaltyKind::new(family, args.alpha).map_err(|e| BenchError::Config(e.to_string()))?;
    let methods = args
        .method
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>, _>>()?;
    Ok(BenchConfig {
        node: args.node.parse::<Node>()?,
        methods,
        penalty,
        gamma: args.gamma,
        batch: args.batch,
        m: args.m,
        n: args.n,
        iterations: args.iterations,
        repeats: args.repeats,
        seed: args.seed,
        out_path: args.out,
        log_domain: args.log_domain,
        float32: args.float32,
        parallel_batch: args.parallel_batch,
    })
}

fn run(args: Args) -> Result<(), BenchError> {
    let cfg = config(args)?;
    let records = run_bench(&cfg)?;
    match &cfg.out_path {
        Some(path) => write_csv(&records, path),
        None => {
            print!("{}", to_csv(&records));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ddn-bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
