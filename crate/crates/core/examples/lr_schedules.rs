//! Poly and step learning-rate schedules.

use hrseg::train::{poly_lr, step_lr};

fn main() -> hrseg::Result<()> {
    let total = 1000;
    println!("poly, lr0 0.01, power 0.9, {total} iterations");
    for iter in [0, 250, 500, 750, 900, 1000] {
        println!("  iter {iter:>4}: {:.7}", poly_lr(iter, total, 0.01, 0.9)?);
    }
    println!("step, lr0 0.1, x0.1 at epochs 30, 60, 90");
    for epoch in [0, 29, 30, 59, 60, 90, 95] {
        println!("  epoch {epoch:>2}: {:.0e}", step_lr(epoch, 0.1, &[30, 60, 90], 0.1));
    }
    Ok(())
}
