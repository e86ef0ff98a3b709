//! Finite-difference check of every differentiable block.

use relation3d::gradsuite::gradient_suite;

fn main() -> relation3d::Result<()> {
    let start = std::time::Instant::now();
    let report = gradient_suite(3)?;
    for e in &report.entries {
        println!(
            "{:<36} seed {}  max rel err {:.2e}  (tol {:.0e})  {}",
            e.check,
            e.seed,
            e.max_rel_error,
            e.tol,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    println!("all passed: {} in {:.2}s", report.passed, start.elapsed().as_secs_f64());
    Ok(())
}
