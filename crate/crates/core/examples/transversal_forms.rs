//! Basic forms on a circle bundle over a torus: contraction with ξ, Lie
//! derivative, type decomposition and the Lefschetz pair L, Λ.
//!
//! cargo run --release --example transversal_forms

use sasaki::forms::{
    exterior_d, lambda_contract, random_transversal, transversal_suite, type_project, GeneralForm, TransversalForm,
};
use sasaki::grid::{make_grid, BaseManifold, GridSpec};
use sasaki::Complex64;

fn main() -> sasaki::Result<()> {
    let grid = make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(24, 24, 8))?;

    let a = random_transversal(&grid, 1, 7)?;
    let da = TransversalForm::restrict(&exterior_d(a.form())?);
    println!("|dα| = {:.3e}, still basic: {:.1e}", da.form().max_norm(), da.check()?);

    let a10 = type_project(&a, 1)?;
    let a01 = type_project(&a, 0)?;
    let sum = a10.form().add(a01.form())?;
    println!("α = α(1,0) + α(0,1) up to {:.1e}", sum.sub(a.form())?.max_norm());

    let domega = TransversalForm::new(GeneralForm::domega(&grid)?, 1e-10)?;
    let lam = lambda_contract(&domega)?;
    let worst = lam.values.iter().map(|v| (v - 1.0).norm()).fold(0.0, f64::max);
    println!("Λ(dω) = 1 up to {worst:.1e}");

    let r = transversal_suite(&grid, 50, 3)?;
    println!("{r:#?}");
    Ok(())
}
