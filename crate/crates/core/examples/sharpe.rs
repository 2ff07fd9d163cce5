//! Sellers and buyers in a poor market: per-agent Sharpe ratio of the
//! trained strategy against holding the initial position.
//!
//!     cargo run --release --example sharpe -- [config] [out]

use mvexec::cli;
use mvexec::config::RunConfig;
use mvexec::io::opt_num;

fn main() -> mvexec::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/exp5_sharpe.json").into());
    let out = args.next().unwrap_or_else(|| "out/exp5_sharpe".into());
    let cfg = RunConfig::load(path.as_ref())?;
    let (report, _) = cli::sharpe(&cfg, out.as_ref())?;
    for (k, (sr, c)) in report.ratios.iter().zip(&report.cohorts).enumerate() {
        println!("agent {k} ({}): {}", c.as_str(), opt_num(*sr));
    }
    println!("sellers {}, buyers {}", opt_num(report.long_mean), opt_num(report.short_mean));
    Ok(())
}
