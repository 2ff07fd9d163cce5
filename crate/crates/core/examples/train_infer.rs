//! Train an ensemble on a configuration, run inference on fresh paths and
//! print the value at t = 0 with the holdings path of each agent.
//!
//!     cargo run --release --example train_infer -- [config]

use mvexec::cli;
use mvexec::config::RunConfig;
use mvexec::eval::rel_error;

fn main() -> mvexec::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/exp1_table4.json").into());
    let cfg = RunConfig::load(path.as_ref())?;
    let start = std::time::Instant::now();
    let (trained, inf) = cli::train_and_infer(&cfg)?;
    for (e, m) in trained.members.iter().enumerate() {
        println!(
            "member {e}: {} epochs, {} psi passes, in-sample values {:?}",
            m.epochs, m.psi_iterations, m.value
        );
    }
    println!("ensemble values {:?} after {:.1?}", inf.value, start.elapsed());
    if let Some(r) = &cfg.evaluation.reference {
        println!("{}: {} ({:.4}% off)", r.label, r.value, rel_error(r.value, inf.value[0])?);
    }
    let (n, d, k) = (inf.controls.n, inf.controls.d, inf.controls.k);
    for agent in 0..k {
        for i in 0..d {
            let path: Vec<String> = (0..=n).map(|s| format!("{:.3}", inf.holdings[(s * d + i) * k + agent])).collect();
            println!("agent {agent} asset {i}: {}", path.join(" "));
        }
    }
    Ok(())
}
