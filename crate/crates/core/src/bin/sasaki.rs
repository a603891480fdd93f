use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sasaki::cli::{execute, threads_from_env, Overrides, EXIT_VALIDATION};

/// Numerical laboratory for holomorphic bundles on Sasakian manifolds.
#[derive(Parser)]
#[command(name = "sasaki", version)]
struct Args {
    /// verify | bundle | flow | moduli | convergence-study
    command: String,
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// hopf | sphere | torus
    #[arg(long)]
    manifold: Option<String>,
    #[arg(long)]
    k_l: Option<u32>,
    /// Modular parameter as `re,im`.
    #[arg(long, value_parser = parse_pair)]
    tau: Option<[f64; 2]>,
    /// `nx,ny,ntheta`
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    fd_order: Option<usize>,
    /// Preset (line_k, split_a_b, ext_a_b) or a descriptor .json file.
    #[arg(long)]
    bundle: Option<String>,
    /// Preset (jacobian, extension, gauged_pair, constant) or a .json file.
    #[arg(long)]
    family: Option<String>,
    /// Step size or `auto`.
    #[arg(long)]
    dt: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Stop once sup|iΛK − λ| falls below this.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// `nx,ny,nt;nx,ny,nt;...`
    #[arg(long)]
    resolutions: Option<String>,
    /// `reference` or `random:<eps>`
    #[arg(long)]
    initial_metric: Option<String>,
    #[arg(long)]
    potential_degree: Option<usize>,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected `re,im`".to_string())
}

fn main() -> ExitCode {
    let a = Args::parse();
    match threads_from_env() {
        Ok(Some(n)) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool");
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    }
    let ov = Overrides {
        manifold: a.manifold,
        k_l: a.k_l,
        tau: a.tau,
        grid: a.grid,
        fd_order: a.fd_order,
        bundle: a.bundle,
        family: a.family,
        dt: a.dt,
        max_steps: a.max_steps,
        tol: a.tol,
        seed: a.seed,
        samples: a.samples,
        output: a.output,
        resolutions: a.resolutions,
        initial_metric: a.initial_metric,
        potential_degree: a.potential_degree,
    };
    ExitCode::from(execute(&a.command, a.config.as_deref(), &ov) as u8)
}
