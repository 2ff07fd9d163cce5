//! Backward recursion against exhaustive search on a deterministic market,
//! for one, two and three steps.
//!
//!     cargo run --release --example dp_oracle

use mvexec::bsde::solve_tree;
use mvexec::config::RunConfig;
use mvexec::eval::dp_oracle;

fn main() -> mvexec::Result<()> {
    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/oracle_tiny.json").as_ref())?;
    let grid = &cfg.grids()?[0];
    let psi = -cfg.market.initial_wealth()[0];
    for n in 1..=3 {
        let tree = solve_tree(&cfg.market, grid, n, psi)?;
        let dp = dp_oracle(&cfg.market, grid, n, psi)?;
        println!(
            "N = {n}: recursion {:.12} {:?}, exhaustive {:.12} {:?}",
            tree.value, tree.controls, dp.value, dp.controls
        );
    }
    Ok(())
}
