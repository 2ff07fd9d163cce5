//! Save trained networks, load them back and check that inference is
//! unchanged bit for bit.
//!
//!     cargo run --release --example checkpoint

use mvexec::cli;
use mvexec::config::RunConfig;

fn main() -> mvexec::Result<()> {
    let mut cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/exp1_table4.json").as_ref())?;
    cfg.solver.ensemble = 2;
    let dir = std::env::temp_dir().join(format!("mvexec-checkpoint-{}", std::process::id()));
    let (trained, _) = cli::train(&cfg, &dir)?;
    let before = cli::run_inference(&cfg, &trained.checkpoints())?;
    let loaded = cli::load_checkpoints(&dir.join("checkpoints"), cfg.market.k())?;
    let after = cli::run_inference(&cfg, &loaded)?;
    let same = before.policy == after.policy
        && before.value.iter().zip(&after.value).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("{} members reloaded from {}; identical inference: {same}", loaded.len(), dir.display());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
