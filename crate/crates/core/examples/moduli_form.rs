//! The induced hermitian form on the parameter space of two families:
//! the Jacobian of degree-zero line bundles (constant form) and a stable
//! extension whose sub line bundle moves.
//!
//! cargo run --release --example moduli_form

use sasaki::cli::family_preset;
use sasaki::family::{build_family, check_kahler, ddbar_potential, jacobian_constant, moduli_form};

fn main() -> sasaki::Result<()> {
    let jac = build_family(&family_preset("jacobian")?)?;
    let sample = moduli_form(&jac)?;
    println!("jacobian: analytic constant {:.6}", jacobian_constant(&jac));
    for p in sample.points.iter().take(3) {
        println!("  s = {:?}: G = {:.6}", p.s, p.matrix()[(0, 0)].re);
    }
    // a constant form has the potential G·|s|²
    let fit = ddbar_potential(&sample, 2)?;
    println!("  ∂∂̄-potential of degree {}: max error {:.2e}", fit.degree, fit.max_error);

    // one interior point keeps this quick: 25 HE metrics
    let mut cfg = family_preset("extension")?;
    cfg.param_points = 5;
    let ext = build_family(&cfg)?;
    let sample = moduli_form(&ext)?;
    let k = check_kahler(&ext, &sample)?;
    for p in &sample.points {
        println!("extension: s = {:?}: G = {:.6}", p.s, p.matrix()[(0, 0)].re);
    }
    println!("  positive: min eigenvalue {:.4}", k.min_eigenvalue_over_s);
    Ok(())
}
