//! Efficient frontier of the liquidation problem: one training run per risk
//! aversion, gain and standard deviation on fresh paths, degree-4 fit.
//!
//!     cargo run --release --example frontier -- [config] [out]

use mvexec::cli;
use mvexec::config::RunConfig;

fn main() -> mvexec::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/exp1_frontier.json").into());
    let out = args.next().unwrap_or_else(|| "out/exp1_frontier".into());
    let cfg = RunConfig::load(path.as_ref())?;
    let (frontier, _) = cli::frontier(&cfg, out.as_ref())?;
    println!("{:>8} {:>10} {:>8}", "gamma", "gain", "std");
    for p in &frontier.points {
        println!("{:>8} {:>10.4} {:>8.4}", p.gamma, p.gain, p.std);
    }
    if let Some(g) = cfg.evaluation.anchor_gamma {
        let p = cli::frontier_point(&cfg, g)?;
        println!("anchor gamma {g}: gain {:.4}, std {:.4}", p.gain, p.std);
    }
    println!("written to {out}");
    Ok(())
}
