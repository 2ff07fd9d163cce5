//! Command-line front end. Every subcommand reads one JSON configuration and
//! writes its artifacts plus `manifest.json` into the output directory.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, Cohort, Frontier, FrontierPoint, Objective, SharpeReport};
use crate::io::{num, opt_num, svg_plot, OutputDir, Series, Table};
use crate::market::{generate_batch, simulate_controls, Controls, Noise};
use crate::net::Checkpoint;
use crate::solver::{self, derive_seed, Inference, TrainOutput, TrainRun};
use crate::bsde;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::{Path, PathBuf};

const TAG_MC: u64 = 5;

#[derive(Debug, Parser)]
#[command(name = "mvexec", version, about = "Mean-variance optimal execution for several assets and agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate every constant control column and write the paths
    Simulate(Common),
    /// Train the ensemble and write checkpoints and loss histories
    Train(Common),
    /// Run ensemble inference from saved checkpoints
    Infer(InferArgs),
    /// Train once per risk aversion and write the efficient frontier
    Frontier(Common),
    /// Train, then compare each agent's Sharpe ratio with holding
    Sharpe(Common),
    /// Train, infer and compare the value with the configured reference
    Validate(Common),
    /// Compare the backward recursion with exhaustive search on a tiny
    /// deterministic instance
    Oracle(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// run configuration (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// output directory; defaults to the configuration's `output`, then
    /// `out/<experiment>`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// override the configuration's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// override the ensemble size
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// log progress to stderr
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// directory holding `memberEE_agentKK.ckpt`; defaults to
    /// `<out>/checkpoints`
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.ensemble {
            if e == 0 {
                return Err(Error::Config("ensemble size must be at least 1".into()));
            }
            cfg.solver.ensemble = e;
        }
        Ok(cfg)
    }

    pub fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| Path::new("out").join(&cfg.experiment))
    }
}

/// Exit status for an error: 2 schema, 3 divergence, 4 file I/O, 1 other.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema(_) | Error::Json(_) => 2,
        Error::Divergence(_) => 3,
        Error::Io(_) => 4,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Config(_) => "config",
        Error::NotSpd => "not_spd",
        Error::Singular(_) => "singular",
        Error::Divergence(_) => "divergence",
        Error::Contract(_) => "contract",
        Error::Domain(_) => "domain",
        Error::TooLarge(_) => "too_large",
        Error::Schema(_) => "schema",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Machine-readable error report.
pub fn error_report(e: &Error) -> String {
    json!({ "error": error_kind(e), "message": e.to_string(), "exit_code": exit_code(e) }).to_string()
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        eprintln!("[{}] {}", record.level(), record.args());
    }
    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

/// Parse arguments, run, and return the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_report(&e));
            exit_code(&e)
        }
    }
}

/// Execute a subcommand; returns a one-line summary.
pub fn run(command: &Command) -> Result<String> {
    let common = match command {
        Command::Infer(a) => &a.common,
        Command::Simulate(c)
        | Command::Train(c)
        | Command::Frontier(c)
        | Command::Sharpe(c)
        | Command::Validate(c)
        | Command::Oracle(c) => c,
    };
    if common.verbose && log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
    let cfg = common.load()?;
    let out = common.out_dir(&cfg);
    match command {
        Command::Simulate(_) => simulate(&cfg, &out),
        Command::Train(_) => train(&cfg, &out).map(|(_, m)| m),
        Command::Infer(a) => {
            let dir = a.checkpoints.clone().unwrap_or_else(|| out.join("checkpoints"));
            infer(&cfg, &out, &dir).map(|(_, m)| m)
        }
        Command::Frontier(_) => frontier(&cfg, &out).map(|(f, _)| format!("frontier with {} points", f.points.len())),
        Command::Sharpe(_) => sharpe(&cfg, &out).map(|(r, _)| {
            format!("sharpe: long mean {}, short mean {}", opt_num(r.long_mean), opt_num(r.short_mean))
        }),
        Command::Validate(_) => validate(&cfg, &out).map(|v| v.summary()),
        Command::Oracle(_) => oracle(&cfg, &out).map(|o| o.summary()),
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let run_id = crate::io::run_id(cfg, "simulate");
    let mut dir = OutputDir::create(out, run_id.clone())?;
    let grids = cfg.grids()?;
    let batch = generate_batch(&cfg.market, &grids[0], cfg.solver.steps, cfg.solver.paths, cfg.seed)?;
    let mut buf = Vec::new();
    batch.write_csv(&mut buf, &run_id)?;
    dir.write_bytes("paths.csv", &buf)?;
    dir.finish(cfg, "simulate")?;
    Ok(format!("simulated {} paths x {} columns", cfg.solver.paths, grids[0].len()))
}

pub fn checkpoint_name(member: usize, agent: usize) -> String {
    format!("member{member:02}_agent{agent:02}.ckpt")
}

fn write_training(dir: &mut OutputDir, trained: &TrainOutput) -> Result<()> {
    let mut losses = Table::new(&["member", "agent", "epoch", "loss"]);
    for (e, m) in trained.members.iter().enumerate() {
        for (k, ck) in m.checkpoints.iter().enumerate() {
            let mut bytes = Vec::new();
            ck.write_to(&mut bytes)?;
            dir.write_bytes(&format!("checkpoints/{}", checkpoint_name(e, k)), &bytes)?;
            for (ep, l) in m.loss_history[k].iter().enumerate() {
                losses.push(vec![e.to_string(), k.to_string(), ep.to_string(), num(*l)]);
            }
        }
    }
    dir.write_table("losses.csv", &losses)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(TrainOutput, String)> {
    let mut dir = OutputDir::create(out, crate::io::run_id(cfg, "train"))?;
    let run = TrainRun::new(cfg.market.clone(), cfg.grids()?, cfg.solver_config())?;
    let trained = run.train()?;
    write_training(&mut dir, &trained)?;
    dir.finish(cfg, "train")?;
    let epochs: Vec<usize> = trained.members.iter().map(|m| m.epochs).collect();
    Ok((trained, format!("trained {} members, epochs {epochs:?}", cfg.solver.ensemble)))
}

/// Load `checkpoints[e][k]` written by [`train`].
pub fn load_checkpoints(dir: &Path, agents: usize) -> Result<Vec<Vec<Checkpoint>>> {
    let mut out = Vec::new();
    for e in 0.. {
        if !dir.join(checkpoint_name(e, 0)).exists() {
            break;
        }
        let member = (0..agents)
            .map(|k| Checkpoint::load(&dir.join(checkpoint_name(e, k))))
            .collect::<Result<Vec<_>>>()?;
        out.push(member);
    }
    if out.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no checkpoints in {}", dir.display()),
        )));
    }
    Ok(out)
}

pub fn run_inference(cfg: &RunConfig, checkpoints: &[Vec<Checkpoint>]) -> Result<Inference> {
    solver::infer(&cfg.market, &cfg.grids()?, checkpoints, &cfg.solver, solver::eval_seed(cfg.seed))
}

fn write_inference(dir: &mut OutputDir, cfg: &RunConfig, inf: &Inference) -> Result<()> {
    let (n, d, k) = (inf.controls.n, inf.controls.d, inf.controls.k);
    let dt = cfg.market.horizon / n as f64;
    let mut t = Table::new(&["n", "t", "agent", "asset", "v", "alpha"]);
    for step in 0..=n {
        for kk in 0..k {
            for i in 0..d {
                let v = if step < n { num(inf.controls.at(step)[i * k + kk]) } else { "NA".into() };
                let a = inf.holdings[(step * d + i) * k + kk];
                t.push(vec![step.to_string(), num(step as f64 * dt), kk.to_string(), i.to_string(), v, num(a)]);
            }
        }
    }
    dir.write_table("controls.csv", &t)?;
    let mut alpha = Vec::new();
    let mut rates = Vec::new();
    for kk in 0..k {
        for i in 0..d {
            alpha.push(Series {
                name: format!("agent {kk}, asset {i}"),
                points: (0..=n).map(|s| (s as f64 * dt, inf.holdings[(s * d + i) * k + kk])).collect(),
                markers: false,
            });
            rates.push(Series {
                name: format!("agent {kk}, asset {i}"),
                points: (0..n).map(|s| (s as f64 * dt, inf.controls.at(s)[i * k + kk])).collect(),
                markers: false,
            });
        }
    }
    dir.write_bytes("alpha.svg", svg_plot("Holdings", "t", "alpha*(t)", &alpha).as_bytes())?;
    dir.write_bytes("controls.svg", svg_plot("Trade rates", "t", "v*(t)", &rates).as_bytes())?;
    Ok(())
}

fn values_table(cfg: &RunConfig, approx: f64) -> Result<(Table, Option<f64>)> {
    let mut t = Table::new(&["experiment", "T", "analytical", "approx", "rel_err_pct"]);
    let (analytical, err) = match &cfg.evaluation.reference {
        Some(r) => (num(r.value), Some(eval::rel_error(r.value, approx)?)),
        None => ("NA".into(), None),
    };
    t.push(vec![cfg.experiment.clone(), num(cfg.market.horizon), analytical, num(approx), opt_num(err)]);
    Ok((t, err))
}

pub fn infer(cfg: &RunConfig, out: &Path, checkpoints: &Path) -> Result<(Inference, String)> {
    let ck = load_checkpoints(checkpoints, cfg.market.k())?;
    let mut dir = OutputDir::create(out, crate::io::run_id(cfg, "infer"))?;
    let inf = run_inference(cfg, &ck)?;
    write_inference(&mut dir, cfg, &inf)?;
    let (t, _) = values_table(cfg, inf.value[0])?;
    dir.write_table("values.csv", &t)?;
    dir.finish(cfg, "infer")?;
    let msg = format!("inferred with {} members; values {:?}", ck.len(), inf.value);
    Ok((inf, msg))
}

/// Train the ensemble and run inference on fresh paths.
pub fn train_and_infer(cfg: &RunConfig) -> Result<(TrainOutput, Inference)> {
    let run = TrainRun::new(cfg.market.clone(), cfg.grids()?, cfg.solver_config())?;
    let trained = run.train()?;
    let inf = run_inference(cfg, &trained.checkpoints())?;
    Ok((trained, inf))
}

/// Objective of agent 0 under `controls` on fresh evaluation paths.
pub fn evaluate_controls(cfg: &RunConfig, controls: &Controls) -> Result<Vec<Objective>> {
    eval::mc_objective(&cfg.market, controls, cfg.evaluation.paths, derive_seed(cfg.seed, TAG_MC))
}

/// Configuration with every agent's risk aversion set to `gamma`.
pub fn with_gamma(cfg: &RunConfig, gamma: f64) -> RunConfig {
    let mut c = cfg.clone();
    for a in &mut c.market.agents {
        a.gamma = gamma;
    }
    c
}

/// Train and evaluate at one risk aversion; the point is the terminal gain
/// of agent 0.
pub fn frontier_point(cfg: &RunConfig, gamma: f64) -> Result<FrontierPoint> {
    let c = with_gamma(cfg, gamma);
    let (_, inf) = train_and_infer(&c)?;
    let o = evaluate_controls(&c, &inf.controls)?[0];
    Ok(FrontierPoint { gamma, gain: o.mean, std: o.std() })
}

pub fn frontier(cfg: &RunConfig, out: &Path) -> Result<(Frontier, String)> {
    let mut dir = OutputDir::create(out, crate::io::run_id(cfg, "frontier"))?;
    let points = cfg
        .evaluation
        .gammas
        .iter()
        .map(|&g| frontier_point(cfg, g))
        .collect::<Result<Vec<_>>>()?;
    if points.len() < eval::FRONTIER_DEGREE + 1 {
        return Err(Error::Config(format!(
            "a degree {} frontier needs at least {} risk aversions",
            eval::FRONTIER_DEGREE,
            eval::FRONTIER_DEGREE + 1
        )));
    }
    let f = eval::fit_frontier(points);
    let mut t = Table::new(&["gamma", "gain", "std"]);
    for p in &f.points {
        t.push(vec![num(p.gamma), num(p.gain), num(p.std)]);
    }
    dir.write_table("frontier.csv", &t)?;
    let mut fit = Table::new(&["power", "coefficient", "degenerate"]);
    for (j, c) in f.fit.iter().enumerate() {
        fit.push(vec![j.to_string(), num(*c), f.degenerate.to_string()]);
    }
    dir.write_table("frontier_fit.csv", &fit)?;
    let mut series = vec![Series {
        name: "trained".into(),
        points: f.points.iter().map(|p| (p.std, p.gain)).collect(),
        markers: true,
    }];
    if !f.degenerate {
        let lo = f.points.iter().map(|p| p.std).fold(f64::INFINITY, f64::min);
        let hi = f.points.iter().map(|p| p.std).fold(f64::NEG_INFINITY, f64::max);
        series.push(Series {
            name: "degree 4 fit".into(),
            points: (0..=50)
                .map(|j| {
                    let s = lo + (hi - lo) * j as f64 / 50.0;
                    (s, f.eval_fit(s).unwrap())
                })
                .collect(),
            markers: false,
        });
    }
    dir.write_bytes("frontier.svg", svg_plot("Efficient frontier", "standard deviation", "expected gain", &series).as_bytes())?;
    dir.finish(cfg, "frontier")?;
    Ok((f, "frontier written".into()))
}

/// Per-agent Sharpe ratios of the trained strategy against holding the
/// initial position, on common fresh paths.
pub fn sharpe_report(cfg: &RunConfig, controls: &Controls) -> Result<SharpeReport> {
    let spec = &cfg.market;
    let (k, d) = (spec.k(), spec.d());
    let noise = Noise::generate(spec, controls.n, cfg.evaluation.paths, derive_seed(cfg.seed, TAG_MC))?;
    let term = simulate_controls(spec, controls, &noise)?;
    let x0 = spec.initial_wealth();
    let wealth: Vec<Vec<f64>> = (0..k).map(|j| term.agent_x(j)).collect();
    let hold: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..term.m)
                .map(|p| (0..d).map(|i| spec.agents[j].alpha0[i] * term.s[p * d + i]).sum())
                .collect()
        })
        .collect();
    let cohorts: Vec<Cohort> = spec.agents.iter().map(|a| Cohort::of(&a.alpha0)).collect();
    eval::sharpe(&wealth, &hold, &x0, &cohorts)
}

pub fn sharpe(cfg: &RunConfig, out: &Path) -> Result<(SharpeReport, Inference)> {
    let mut dir = OutputDir::create(out, crate::io::run_id(cfg, "sharpe"))?;
    let (_, inf) = train_and_infer(cfg)?;
    let rep = sharpe_report(cfg, &inf.controls)?;
    let mut t = Table::new(&["agent", "cohort", "SR"]);
    for (j, (sr, c)) in rep.ratios.iter().zip(&rep.cohorts).enumerate() {
        t.push(vec![j.to_string(), c.as_str().into(), opt_num(*sr)]);
    }
    dir.write_table("sharpe.csv", &t)?;
    write_inference(&mut dir, cfg, &inf)?;
    dir.finish(cfg, "sharpe")?;
    Ok((rep, inf))
}

#[derive(Debug, Clone)]
pub struct Validation {
    pub value: f64,
    pub reference: Option<f64>,
    pub rel_err_pct: Option<f64>,
    pub passed: Option<bool>,
}

impl Validation {
    pub fn summary(&self) -> String {
        match (self.reference, self.rel_err_pct) {
            (Some(r), Some(e)) => format!(
                "value {} vs reference {r}: {e:.4}% ({})",
                self.value,
                if self.passed == Some(true) { "within tolerance" } else { "outside tolerance" }
            ),
            _ => format!("value {} (no reference configured)", self.value),
        }
    }
}

pub fn validate(cfg: &RunConfig, out: &Path) -> Result<Validation> {
    let mut dir = OutputDir::create(out, crate::io::run_id(cfg, "validate"))?;
    let (trained, inf) = train_and_infer(cfg)?;
    write_training(&mut dir, &trained)?;
    write_inference(&mut dir, cfg, &inf)?;
    let (t, err) = values_table(cfg, inf.value[0])?;
    dir.write_table("values.csv", &t)?;
    dir.finish(cfg, "validate")?;
    let reference = cfg.evaluation.reference.as_ref();
    Ok(Validation {
        value: inf.value[0],
        reference: reference.map(|r| r.value),
        rel_err_pct: err,
        passed: reference.zip(err).map(|(r, e)| e <= r.tolerance_pct),
    })
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub recursion: f64,
    pub exhaustive: f64,
    pub same_controls: bool,
}

impl OracleCheck {
    pub fn agrees(&self, tol: f64) -> bool {
        self.same_controls && (self.recursion - self.exhaustive).abs() <= tol
    }

    pub fn summary(&self) -> String {
        format!(
            "recursion {} vs exhaustive {} (difference {:e}), controls {}",
            self.recursion,
            self.exhaustive,
            (self.recursion - self.exhaustive).abs(),
            if self.same_controls { "equal" } else { "differ" }
        )
    }
}

pub fn oracle(cfg: &RunConfig, out: &Path) -> Result<OracleCheck> {
    let mut dir = OutputDir::create(out, crate::io::run_id(cfg, "oracle"))?;
    let grids = cfg.grids()?;
    let n = cfg.solver.steps;
    let run = TrainRun::new(cfg.market.clone(), grids.clone(), cfg.solver_config())?;
    let psi = run.initial_psi()[0];
    let tree = bsde::solve_tree(&cfg.market, &grids[0], n, psi)?;
    let dp = eval::dp_oracle(&cfg.market, &grids[0], n, psi)?;
    let check = OracleCheck { recursion: tree.value, exhaustive: dp.value, same_controls: tree.controls == dp.controls };
    let mut t = Table::new(&["steps", "recursion", "exhaustive", "abs_diff", "recursion_controls", "exhaustive_controls"]);
    let fmt = |c: &[usize]| c.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(" ");
    t.push(vec![
        n.to_string(),
        num(tree.value),
        num(dp.value),
        num((tree.value - dp.value).abs()),
        fmt(&tree.controls),
        fmt(&dp.controls),
    ]);
    dir.write_table("oracle.csv", &t)?;
    dir.finish(cfg, "oracle")?;
    Ok(check)
}

/// Holdings of asset 0 after the first trade, averaged over agents.
pub fn first_step_holding(inf: &Inference, d: usize, k: usize) -> f64 {
    (0..k).map(|j| inf.holdings[d * k + j]).sum::<f64>() / k as f64
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// First-step holdings over a risk aversion by benchmark weight grid.
#[derive(Debug, Clone)]
pub struct SensitivityGrid {
    pub gammas: Vec<f64>,
    pub phis: Vec<f64>,
    /// `holdings[p][g]` at `phis[p]`, `gammas[g]`
    pub holdings: Vec<Vec<f64>>,
}

impl SensitivityGrid {
    /// Slope against risk aversion, one per benchmark weight.
    pub fn gamma_slopes(&self) -> Vec<f64> {
        self.holdings.iter().map(|row| slope(&self.gammas, row)).collect()
    }

    /// Slope against the benchmark weight, one per risk aversion.
    pub fn phi_slopes(&self) -> Vec<f64> {
        (0..self.gammas.len())
            .map(|g| {
                let col: Vec<f64> = self.holdings.iter().map(|row| row[g]).collect();
                slope(&self.phis, &col)
            })
            .collect()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["gamma", "phi", "alpha_first_step"]);
        for (p, row) in self.holdings.iter().enumerate() {
            for (g, a) in row.iter().enumerate() {
                t.push(vec![num(self.gammas[g]), num(self.phis[p]), num(*a)]);
            }
        }
        t
    }
}

/// Train and infer at every `(gamma, phi)` pair of the configuration's
/// sweep, with all agents sharing the pair.
pub fn sensitivity(cfg: &RunConfig) -> Result<SensitivityGrid> {
    let (gammas, phis) = (cfg.evaluation.gammas.clone(), cfg.evaluation.phis.clone());
    if gammas.len() < 2 || phis.len() < 2 {
        return Err(Error::Config("the sweep needs at least two values of gamma and of phi".into()));
    }
    let mut holdings = Vec::with_capacity(phis.len());
    for &phi in &phis {
        let mut row = Vec::with_capacity(gammas.len());
        for &gamma in &gammas {
            let mut c = with_gamma(cfg, gamma);
            for a in &mut c.market.agents {
                a.phi = phi;
            }
            let (_, inf) = train_and_infer(&c)?;
            let a = first_step_holding(&inf, c.market.d(), c.market.k());
            log::info!("gamma {gamma} phi {phi}: first-step holding {a}");
            row.push(a);
        }
        holdings.push(row);
    }
    Ok(SensitivityGrid { gammas, phis, holdings })
}
