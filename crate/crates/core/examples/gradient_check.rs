//! Compares every hand-written backward pass with finite differences.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use adaptfed::gradcheck::run_gradient_suites;

fn main() -> adaptfed::Result<()> {
    let checks = run_gradient_suites(0, 5)?;
    for c in &checks {
        println!(
            "{:<17} seed {} {:>5} scalars  max rel err {:.2e}  {}",
            c.suite,
            c.seed,
            c.scalars,
            c.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
