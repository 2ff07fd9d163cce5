//! Monte Carlo values of the closed-form single-agent multi-asset allocation
//! and the two-agent allocation, on the bundled two-asset and two-agent
//! configurations.
//!
//!     cargo run --release --example baselines

use mvexec::config::RunConfig;
use mvexec::eval::{guan_hu_alpha, simulate_feedback, zhou_li_alpha, Objective};

fn load(name: &str) -> mvexec::Result<RunConfig> {
    RunConfig::load(format!("{}/configs/{name}", env!("CARGO_MANIFEST_DIR")).as_ref())
}

fn main() -> mvexec::Result<()> {
    let cfg = load("exp1_table3.json")?;
    let spec = &cfg.market;
    let (r, t_end) = (spec.r, spec.horizon);
    // the bank account grows at r and prices at mu - r
    let excess: Vec<f64> = spec.assets.iter().map(|a| a.mu - 2.0 * r).collect();
    let vol: Vec<Vec<f64>> = (0..spec.d())
        .map(|i| (0..spec.d()).map(|j| if i == j { spec.assets[i].sigma } else { 0.0 }).collect())
        .collect();
    let gamma = spec.agents[0].gamma;
    let run = simulate_feedback(spec, 100, cfg.evaluation.paths, 11, |t, _, x, _| {
        zhou_li_alpha(&excess, &vol, gamma, r, t_end, t, x)
    })?;
    let o = Objective::from_samples(&run.agent(0), gamma)?;
    println!("two assets: J = {:.6} +- {:.6}", o.value, o.std_error);

    let cfg = load("exp1_table4.json")?;
    let spec = &cfg.market;
    let mu: Vec<f64> = spec.agents.iter().map(|_| spec.assets[0].mu - spec.r).collect();
    let gammas: Vec<f64> = spec.agents.iter().map(|a| a.gamma).collect();
    let sigmas: Vec<f64> = spec.agents.iter().map(|_| spec.assets[0].sigma).collect();
    let phis: Vec<f64> = spec.agents.iter().map(|a| a.phi).collect();
    let alloc = guan_hu_alpha(&mu, &gammas, &sigmas, &phis)?;
    println!("two agents: allocation {alloc:?}");
    let run = simulate_feedback(spec, 100, cfg.evaluation.paths, 12, |_, _, _, k| Ok(vec![alloc[k]]))?;
    for k in 0..spec.k() {
        let o = Objective::from_samples(&run.agent(k), gammas[k])?;
        println!("  agent {k}: J = {:.6} +- {:.6}", o.value, o.std_error);
    }
    Ok(())
}
