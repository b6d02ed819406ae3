//! Finite-difference check of every differentiable op and of the lifting
//! losses, printing the worst relative error per check.
//!
//! `cargo run --release --example gradcheck`

use avatar3d::lifting::train::loss_gradchecks;
use avatar3d::neural::gradcheck::core_suite;

fn main() -> avatar3d::Result<()> {
    let mut checks = core_suite(0, 1e-6);
    checks.extend(loss_gradchecks::<f32>(0, 1e-4)?);
    for c in &checks {
        println!(
            "{:<28} max rel err {:.2e} (tol {:.0e}) {}",
            c.op,
            c.max_rel_error,
            c.tolerance,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(())
}
