//! Forward simulation of every constant control column on shared noise,
//! with terminal wealth statistics per column.
//!
//!     cargo run --release --example simulate -- [config]

use mvexec::config::RunConfig;
use mvexec::eval::Objective;
use mvexec::market::{generate_batch, simulate_controls, Controls, Noise};

fn main() -> mvexec::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/exp1_table1.json").into());
    let cfg = RunConfig::load(path.as_ref())?;
    let spec = &cfg.market;
    let grid = &cfg.grids()?[0];
    let (n, m) = (cfg.solver.steps, 2000);

    let batch = generate_batch(spec, grid, n, 4, cfg.seed)?;
    let mut csv = Vec::new();
    batch.write_csv(&mut csv, "example")?;
    println!("batch csv: {} bytes for 4 paths x {} columns", csv.len(), grid.len());

    let noise = Noise::generate(spec, n, m, cfg.seed)?;
    println!("{:>12} {:>14} {:>12}", "rate", "E[X(T)]", "std");
    for &v in grid.values() {
        let mut controls = Controls::zeros(n, spec.d(), spec.k());
        for step in 0..n {
            controls.at_mut(step).iter_mut().for_each(|c| *c = v);
        }
        let term = simulate_controls(spec, &controls, &noise)?;
        let o = Objective::from_samples(&term.agent_x(0), 0.0)?;
        println!("{v:>12.2} {:>14.6} {:>12.6}", o.mean, o.std());
    }
    Ok(())
}
