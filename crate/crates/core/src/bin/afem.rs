use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use afem::afem::{run, EstimatorChoice, Example, ProblemKind, RefineMode, RunConfig};
use afem::rof::DualSpace;
use afem::Error;

/// Adaptive primal-dual finite elements for the p-Laplace and ROF problems.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, value_parser = ["plaplace", "rof"])]
    problem: String,
    #[arg(long, value_parser = ["lshape", "square", "circle"])]
    example: String,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = ["uniform", "adaptive"])]
    refine: String,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value = "pd", value_parser = ["pd", "res", "both"])]
    estimator: String,
    #[arg(long, default_value = "dc", value_parser = ["c", "dc"])]
    dual_space: String,
    #[arg(long)]
    max_dofs: usize,
    #[arg(long)]
    out: PathBuf,
    /// ADMM iteration cap per solve.
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    /// ADMM stopping tolerance is hbar raised to this power.
    #[arg(long, default_value_t = 2.0)]
    tol_power: f64,
}

fn config(args: Args) -> afem::Result<RunConfig> {
    Ok(RunConfig {
        problem: args.problem.parse::<ProblemKind>()?,
        example: args.example.parse::<Example>()?,
        sigma: args.sigma,
        alpha: args.alpha,
        refine: args.refine.parse::<RefineMode>()?,
        theta: args.theta,
        estimator: args.estimator.parse::<EstimatorChoice>()?,
        dual_space: args.dual_space.parse::<DualSpace>()?,
        max_dofs: args.max_dofs,
        out_dir: Some(args.out),
        max_iters: args.max_iters,
        tol_power: args.tol_power,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Some(n) = std::env::var("AFEM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let config = match config(args).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&config) {
        Ok(records) => {
            if let Some(last) = records.last() {
                log::info!("finished after {} levels, final ndof {}", records.len(), last.ndof);
            }
            ExitCode::SUCCESS
        }
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
