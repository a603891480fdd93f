//! The flow on the unstable split sum O ⊕ O(1) does not converge: it stalls
//! with iΛK splitting into the blockwise constants.
//!
//! cargo run --release --example split_flow

use sasaki::bundle::{HermitianMetric, HolomorphicStructure, SasakianBundle};
use sasaki::flow::{blockwise_constants, run_flow, FlowConfig};
use sasaki::grid::{make_grid, BaseManifold, GridSpec};
use sasaki::Complex64;

fn main() -> sasaki::Result<()> {
    let grid = make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(16, 16, 8))?;
    let b = SasakianBundle::new(&grid, &[0, 1])?;
    let d = HolomorphicStructure::reference(&b);
    let h0 = HermitianMetric::random(&b, 21, 0.3)?;

    let run = run_flow(&d, &h0, &FlowConfig { max_steps: 20_000, ..Default::default() })?;
    let r = &run.report;
    println!("{:?} after {} steps; sup residual {:.4}", r.verdict, r.steps, r.final_sup_residual);
    let means: Vec<f64> = r.final_eig_means.iter().map(|m| m + r.lambda).collect();
    println!("eigenvalue means of iΛK: {means:?}");
    println!("blockwise constants:      {:?}", blockwise_constants(&b)?);
    Ok(())
}
