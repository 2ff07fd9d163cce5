//! Compare tape gradients with central differences for every primitive and
//! a composite graph.
//!
//!     cargo run --release --example gradcheck

use mvexec::autograd::gradcheck::{max_relative_error, standard_cases};

fn main() -> mvexec::Result<()> {
    let mut worst = 0.0f64;
    for case in standard_cases(17) {
        let err = max_relative_error(&case)?;
        worst = worst.max(err);
        println!("{:<24} max rel err {err:.2e}", case.name);
    }
    println!("worst {worst:.2e}");
    Ok(())
}
