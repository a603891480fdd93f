//! Residual-vs-resolution table for the Hopf structure, with fitted orders.
//!
//! cargo run --release --example convergence_study

use sasaki::cli::{convergence_study, ManifoldSpec};

fn main() -> sasaki::Result<()> {
    let levels: Vec<[usize; 3]> = [12, 16, 24, 32].iter().map(|&n| [n, n, 16]).collect();
    let (_, table) = convergence_study(&ManifoldSpec::Hopf, &levels, None, 4, 1)?;
    print!("{:<20}", "identity");
    for h in &table.spacing {
        print!("  h={h:<9.4}");
    }
    println!("  order");
    for (name, residuals) in &table.residuals {
        print!("{name:<20}");
        for r in residuals {
            print!("  {r:<11.2e}");
        }
        match table.orders[name] {
            Some(o) => println!("  {o:.2}"),
            None => println!("  -"),
        }
    }
    Ok(())
}
