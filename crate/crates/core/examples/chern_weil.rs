//! Degrees and Einstein constants from curvature, and their independence
//! of the hermitian metric.
//!
//! cargo run --release --example chern_weil

use sasaki::bundle::{
    chern_weil_suite, degree, einstein_constant, einstein_constant_topological, HermitianMetric, HolomorphicStructure,
    SasakianBundle,
};
use sasaki::grid::{make_grid, BaseManifold, GridSpec};
use sasaki::Complex64;
use std::f64::consts::PI;

fn main() -> sasaki::Result<()> {
    let grid = make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(24, 24, 8))?;

    for k in -2..=2 {
        let b = SasakianBundle::new(&grid, &[k])?;
        let d = HolomorphicStructure::reference(&b);
        let deg = degree(&d, &b.reference_metric())?;
        println!("deg O({k:>2}) = {deg:>9.6}  (2πk = {:>9.6})", 2.0 * PI * k as f64);
    }

    let b = SasakianBundle::new(&grid, &[0, 1])?;
    let d = HolomorphicStructure::extension(&b, 0.84)?;
    println!("extension O → E → O(1): λ topological {:.6}", einstein_constant_topological(&b)?);
    for seed in 0..3 {
        let h = HermitianMetric::random(&b, seed, 0.3)?;
        println!("  random metric {seed}: λ = {:.12}", einstein_constant(&d, &h)?);
    }

    let r = chern_weil_suite(&grid, 3, 5)?;
    println!("{r:#?}");
    Ok(())
}
