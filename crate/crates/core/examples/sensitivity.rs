//! First-step holdings over the risk aversion and benchmark weight sweep of
//! the sensitivity configuration, with the fitted slopes.
//!
//!     cargo run --release --example sensitivity -- [config] [out]

use mvexec::cli;
use mvexec::config::RunConfig;
use mvexec::io::OutputDir;

fn main() -> mvexec::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/exp2_sensitivity.json").into());
    let out = args.next().unwrap_or_else(|| "out/exp2_sensitivity".into());
    let cfg = RunConfig::load(path.as_ref())?;
    let grid = cli::sensitivity(&cfg)?;
    println!("gamma slopes (expected negative): {:?}", grid.gamma_slopes());
    println!("phi slopes (expected positive):   {:?}", grid.phi_slopes());
    let mut dir = OutputDir::create(out.as_ref(), mvexec::io::run_id(&cfg, "sensitivity"))?;
    dir.write_table("sensitivity.csv", &grid.table())?;
    dir.finish(&cfg, "sensitivity")?;
    Ok(())
}
