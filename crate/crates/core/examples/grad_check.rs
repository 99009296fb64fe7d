//! Finite-difference check of every layer type and of the tiny network in f64.

use hrseg::backbone::NetworkSpec;
use hrseg::verify::grad_check_suite;

fn main() -> hrseg::Result<()> {
    let report = grad_check_suite(&NetworkSpec::tiny(3), None, 48)?;
    print!("{}", report.render());
    let broken = grad_check_suite(&NetworkSpec::tiny(3), Some("bilinear_resize"), 16)?;
    println!("with a corrupted bilinear backward the suite {}", if broken.passed() { "passes" } else { "fails" });
    Ok(())
}
