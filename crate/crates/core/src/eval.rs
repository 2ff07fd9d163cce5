//! Monte Carlo evaluation of strategies, closed-form allocations for the
//! frictionless benchmarks, error metrics, the efficient frontier and the
//! Sharpe-ratio comparison.

use crate::bsde;
use crate::error::{Error, Result};
use crate::market::{simulate_controls, ControlGrid, Controls, MarketSpec, Noise};
use serde::{Deserialize, Serialize};

/// Sample mean, unbiased variance and the mean-variance objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub mean: f64,
    pub variance: f64,
    pub value: f64,
    /// standard error of `mean`
    pub std_error: f64,
    pub samples: usize,
}

impl Objective {
    pub fn from_samples(x: &[f64], gamma: f64) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::Config("need at least two samples".into()));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let variance = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            variance,
            value: mean - 0.5 * gamma * variance,
            std_error: (variance / n).sqrt(),
            samples: x.len(),
        })
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Simulate `controls` on fresh paths; one objective per agent, on the
/// relative terminal wealth.
pub fn mc_objective(spec: &MarketSpec, controls: &Controls, m_eval: usize, seed: u64) -> Result<Vec<Objective>> {
    let noise = Noise::generate(spec, controls.n, m_eval, seed)?;
    let term = simulate_controls(spec, controls, &noise)?;
    (0..spec.k())
        .map(|k| Objective::from_samples(&term.agent_x_hat(k), spec.agents[k].gamma))
        .collect()
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() <= 1e-13 * scale {
            return Err(Error::Singular("pivot vanishes".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for j in col..n {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|j| a[row][j] * x[j]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Dollar allocation `[B B^T]^{-1} A^T (gamma/2 e^{-r(T-t)} - X)` with `A`
/// the excess drifts and `B` the volatility matrix (`b[i]` is row `i`).
#[allow(clippy::too_many_arguments)]
pub fn zhou_li_alpha(a: &[f64], b: &[Vec<f64>], gamma: f64, r: f64, horizon: f64, t: f64, x: f64) -> Result<Vec<f64>> {
    let d = a.len();
    if b.len() != d || b.iter().any(|row| row.is_empty() || row.len() != b[0].len()) {
        return Err(Error::Dimension("volatility matrix does not match the drifts".into()));
    }
    let bbt: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| b[i].iter().zip(&b[j]).map(|(p, q)| p * q).sum()).collect())
        .collect();
    let factor = 0.5 * gamma * (-r * (horizon - t)).exp() - x;
    let sol = solve_linear(bbt, a.to_vec())?;
    Ok(sol.into_iter().map(|v| v * factor).collect())
}

/// Per-agent dollar allocation
/// `mu_k/(gamma_k sigma_k^2) + phi_k/sigma_k * mean_j mu_j/(gamma_j sigma_j (1-phi_j))`.
pub fn guan_hu_alpha(mu: &[f64], gamma: &[f64], sigma: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
    let k = mu.len();
    if gamma.len() != k || sigma.len() != k || phi.len() != k || k == 0 {
        return Err(Error::Dimension("agent parameter lengths differ".into()));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) || phi.iter().any(|&p| !(p < 1.0)) {
        return Err(Error::Config("need sigma > 0 and phi < 1".into()));
    }
    let common = (0..k)
        .map(|j| mu[j] / (gamma[j] * sigma[j] * (1.0 - phi[j])))
        .sum::<f64>()
        / k as f64;
    Ok((0..k)
        .map(|j| mu[j] / (gamma[j] * sigma[j] * sigma[j]) + phi[j] / sigma[j] * common)
        .collect())
}

/// Percent relative error.
pub fn rel_error(actual: f64, approx: f64) -> Result<f64> {
    if actual == 0.0 {
        return Err(Error::Domain("relative error against zero".into()));
    }
    Ok((actual - approx).abs() / actual.abs() * 100.0)
}

/// Terminal wealth samples of a frictionless self-financing strategy given
/// as dollar amounts per asset, rebalanced every step. Impact is ignored.
pub struct FeedbackRun {
    /// `x[m*K + k]`
    pub x: Vec<f64>,
    pub k: usize,
    pub m: usize,
}

impl FeedbackRun {
    pub fn agent(&self, k: usize) -> Vec<f64> {
        (0..self.m).map(|p| self.x[p * self.k + k]).collect()
    }
}

/// `alloc(t, prices, wealth, agent)` returns the dollar amount per asset.
pub fn simulate_feedback<F>(spec: &MarketSpec, n: usize, m: usize, seed: u64, alloc: F) -> Result<FeedbackRun>
where
    F: Fn(f64, &[f64], f64, usize) -> Result<Vec<f64>>,
{
    let noise = Noise::generate(spec, n, m, seed)?;
    let (d, k) = (spec.d(), spec.k());
    let dt = spec.horizon / n as f64;
    let x0 = spec.initial_wealth();
    let mut out = Vec::with_capacity(m * k);
    let mut s = vec![0.0; d];
    let mut s_next = vec![0.0; d];
    for p in 0..m {
        let mut x = x0.clone();
        s.iter_mut().zip(&spec.assets).for_each(|(v, a)| *v = a.s0);
        for step in 0..n {
            let dw = noise.at(step, p);
            for i in 0..d {
                let a = &spec.assets[i];
                s_next[i] = (1.0 + (a.mu - spec.r) * dt) * s[i] + a.sigma * s[i] * dw[i];
            }
            for (kk, xk) in x.iter_mut().enumerate() {
                let pi = alloc(step as f64 * dt, &s, *xk, kk)?;
                let invested: f64 = pi.iter().sum();
                let gain: f64 = (0..d).map(|i| pi[i] / s[i] * (s_next[i] - s[i])).sum();
                *xk += gain + spec.r * dt * (*xk - invested);
            }
            std::mem::swap(&mut s, &mut s_next);
        }
        out.extend(x);
    }
    Ok(FeedbackRun { x: out, k, m })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub gamma: f64,
    pub gain: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub points: Vec<FrontierPoint>,
    /// coefficients of gain as a polynomial in std, lowest order first
    pub fit: Vec<f64>,
    /// the fit could not be determined from the points
    pub degenerate: bool,
}

impl Frontier {
    pub fn eval_fit(&self, std: f64) -> Option<f64> {
        if self.degenerate {
            return None;
        }
        Some(self.fit.iter().rev().fold(0.0, |acc, c| acc * std + c))
    }
}

pub const FRONTIER_DEGREE: usize = 4;

/// Least-squares polynomial coefficients, lowest order first.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Dimension("x and y differ in length".into()));
    }
    if x.len() < degree + 1 {
        return Err(Error::Config(format!("{} points cannot determine a degree {degree} fit", x.len())));
    }
    // work in centred, scaled coordinates for conditioning
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let sx = x.iter().map(|v| (v - mx).abs()).fold(0.0, f64::max);
    if sx == 0.0 {
        return Err(Error::Singular("all abscissae coincide".into()));
    }
    let u: Vec<f64> = x.iter().map(|v| (v - mx) / sx).collect();
    let p = degree + 1;
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for (ui, yi) in u.iter().zip(y) {
        let pow: Vec<f64> = (0..p).map(|j| ui.powi(j as i32)).collect();
        for a in 0..p {
            aty[a] += pow[a] * yi;
            for b in 0..p {
                ata[a][b] += pow[a] * pow[b];
            }
        }
    }
    let c = solve_linear(ata, aty)?;
    // expand sum_j c_j ((x - mx)/sx)^j into powers of x
    let mut out = vec![0.0; p];
    for (j, cj) in c.iter().enumerate() {
        for (q, slot) in out.iter_mut().enumerate().take(j + 1) {
            let binom = (0..q).fold(1.0, |acc, t| acc * (j - t) as f64 / (t + 1) as f64);
            *slot += cj * binom * (-mx).powi((j - q) as i32) / sx.powi(j as i32);
        }
    }
    Ok(out)
}

/// One solve and evaluation per risk aversion; `solve(gamma)` returns the
/// terminal-gain objective of the resulting strategy.
pub fn efficient_frontier<F>(gammas: &[f64], mut solve: F) -> Result<Frontier>
where
    F: FnMut(f64) -> Result<Objective>,
{
    if gammas.len() < FRONTIER_DEGREE + 1 {
        return Err(Error::Config(format!(
            "a degree {FRONTIER_DEGREE} frontier needs at least {} risk aversions",
            FRONTIER_DEGREE + 1
        )));
    }
    let mut points = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let o = solve(g)?;
        points.push(FrontierPoint { gamma: g, gain: o.mean, std: o.std() });
    }
    Ok(fit_frontier(points))
}

pub fn fit_frontier(points: Vec<FrontierPoint>) -> Frontier {
    let x: Vec<f64> = points.iter().map(|p| p.std).collect();
    let y: Vec<f64> = points.iter().map(|p| p.gain).collect();
    match polyfit(&x, &y, FRONTIER_DEGREE) {
        Ok(fit) if fit.iter().all(|c| c.is_finite()) => Frontier { points, fit, degenerate: false },
        _ => Frontier { points, fit: vec![0.0; FRONTIER_DEGREE + 1], degenerate: true },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    /// starts with a long position
    Long,
    Short,
}

impl Cohort {
    pub fn of(alpha0: &[f64]) -> Self {
        if alpha0.iter().sum::<f64>() >= 0.0 {
            Cohort::Long
        } else {
            Cohort::Short
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Cohort::Long => "long",
            Cohort::Short => "short",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpeReport {
    /// `None` when the return variance vanishes
    pub ratios: Vec<Option<f64>>,
    pub cohorts: Vec<Cohort>,
    pub long_mean: Option<f64>,
    pub short_mean: Option<f64>,
}

/// `wealth[k]` and `hold[k]` are terminal samples of the strategy and of
/// holding the initial position; `x0[k]` the starting wealth.
/// Return spreads below this fraction of the largest return are treated as
/// zero.
pub const SHARPE_RELATIVE_FLOOR: f64 = 1e-12;

pub fn sharpe(wealth: &[Vec<f64>], hold: &[Vec<f64>], x0: &[f64], cohorts: &[Cohort]) -> Result<SharpeReport> {
    let k = wealth.len();
    if hold.len() != k || x0.len() != k || cohorts.len() != k {
        return Err(Error::Dimension("per-agent inputs differ in length".into()));
    }
    let mut ratios = Vec::with_capacity(k);
    for j in 0..k {
        if x0[j] == 0.0 {
            return Err(Error::Domain(format!("agent {j} starts with zero wealth")));
        }
        let r: Vec<f64> = wealth[j].iter().map(|x| (x - x0[j]) / x0[j]).collect();
        let r0: Vec<f64> = hold[j].iter().map(|x| (x - x0[j]) / x0[j]).collect();
        let o = Objective::from_samples(&r, 0.0)?;
        let mean0 = r0.iter().sum::<f64>() / r0.len() as f64;
        let sd = o.std();
        // a spread at rounding level is a deterministic return
        let scale = r.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        ratios.push(if sd > SHARPE_RELATIVE_FLOOR * scale { Some((o.mean - mean0) / sd) } else { None });
    }
    let cohort_mean = |c: Cohort| {
        let v: Vec<f64> = (0..k).filter(|&j| cohorts[j] == c).filter_map(|j| ratios[j]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(SharpeReport {
        long_mean: cohort_mean(Cohort::Long),
        short_mean: cohort_mean(Cohort::Short),
        ratios,
        cohorts: cohorts.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub value: f64,
    pub controls: Vec<usize>,
}

pub const DP_LIMIT: u64 = 10_000;

/// Exhaustive search over all control sequences of a deterministic single
/// agent, single asset market. Ties go to the lexicographically first
/// sequence.
pub fn dp_oracle(spec: &MarketSpec, grid: &ControlGrid, n_steps: usize, psi: f64) -> Result<DpSolution> {
    spec.validate()?;
    if spec.d() != 1 || spec.k() != 1 || spec.assets[0].sigma != 0.0 {
        return Err(Error::Config("the oracle needs one asset, one agent and sigma = 0".into()));
    }
    let c = grid.len();
    let total = (c as u64).checked_pow(n_steps as u32).unwrap_or(u64::MAX);
    if total > DP_LIMIT || n_steps == 0 {
        return Err(Error::TooLarge(total));
    }
    let noise = Noise::zero(n_steps, 1, 1);
    let gamma = spec.agents[0].gamma;
    let mut best: Option<DpSolution> = None;
    let mut seq = vec![0usize; n_steps];
    for code in 0..total {
        let mut rest = code;
        for slot in seq.iter_mut().rev() {
            *slot = (rest % c as u64) as usize;
            rest /= c as u64;
        }
        let mut ctl = Controls::zeros(n_steps, 1, 1);
        for (n, &j) in seq.iter().enumerate() {
            ctl.at_mut(n)[0] = grid.values()[j];
        }
        let term = simulate_controls(spec, &ctl, &noise)?;
        let value = bsde::terminal_utility(term.x_hat[0], gamma, psi);
        if best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(DpSolution { value, controls: seq.clone() });
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{AgentSpec, AssetSpec};
    use proptest::prelude::*;

    fn spec(mu: f64, r: f64, sigma: f64, kt: f64) -> MarketSpec {
        MarketSpec {
            r,
            horizon: 1.0,
            assets: vec![AssetSpec { mu, sigma, s0: 1.0, kappa_s: 0.0 }],
            agents: vec![AgentSpec {
                gamma: 1.0,
                phi: 0.0,
                beta: 1.0,
                b0: 0.0,
                alpha0: vec![1.0],
                kappa_p: vec![0.0],
                kappa_tau: vec![kt],
            }],
            correlation: None,
        }
    }

    #[test]
    fn objective_of_a_riskless_hold() {
        let s = spec(0.05, 0.05, 0.0, 0.0);
        let o = mc_objective(&s, &Controls::zeros(10, 1, 1), 50, 1).unwrap()[0];
        assert!((o.mean - 1.0).abs() < 1e-12);
        assert!(o.variance.abs() < 1e-20);
        assert!((o.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn risk_neutral_objective_is_the_mean() {
        let o = Objective::from_samples(&[1.0, 2.0, 4.0], 0.0).unwrap();
        assert_eq!(o.value, o.mean);
        // unbiased variance of 1, 2, 4
        assert!((o.variance - 7.0 / 3.0).abs() < 1e-15);
        assert!(Objective::from_samples(&[1.0], 1.0).is_err());
    }

    #[test]
    fn standard_error_shrinks_by_root_two_when_paths_double() {
        let s = spec(0.1, 0.05, 0.3, 0.0);
        let ctl = Controls::zeros(10, 1, 1);
        let mut ratio = 0.0;
        for seed in 0..4 {
            let a = mc_objective(&s, &ctl, 2000, seed).unwrap()[0];
            let b = mc_objective(&s, &ctl, 4000, seed + 100).unwrap()[0];
            ratio += a.std_error / b.std_error / 4.0;
        }
        assert!((ratio - 2f64.sqrt()).abs() < 0.2 * 2f64.sqrt(), "{ratio}");
    }

    #[test]
    fn zhou_li_examples() {
        let a = zhou_li_alpha(&[0.0], &[vec![0.2]], 6.0, 0.05, 1.0, 0.3, 1.0).unwrap();
        assert_eq!(a, vec![0.0]);
        let a = zhou_li_alpha(&[0.05], &[vec![0.2]], 6.0, 0.05, 1.0, 1.0, 1.0).unwrap();
        assert!((a[0] - 2.5).abs() < 1e-12);
        let sing = zhou_li_alpha(&[0.05, 0.05], &[vec![0.2, 0.0], vec![0.2, 0.0]], 6.0, 0.0, 1.0, 0.0, 1.0);
        assert!(matches!(sing, Err(Error::Singular(_))));
        // diagonal B decouples the assets
        let a = zhou_li_alpha(&[0.05, 0.02], &[vec![0.2, 0.0], vec![0.0, 0.1]], 6.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert!((a[0] - 2.5).abs() < 1e-12 && (a[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn guan_hu_examples() {
        let a = guan_hu_alpha(&[0.12], &[6.0], &[0.2], &[0.0]).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-12);
        let a = guan_hu_alpha(&[0.1, 0.1], &[6.0, 6.0], &[0.2, 0.2], &[0.0, 0.0]).unwrap();
        assert!((a[0] - 0.1 / 0.24).abs() < 1e-12);
        // the relative term raises the allocation
        let b = guan_hu_alpha(&[0.1, 0.1], &[6.0, 6.0], &[0.2, 0.2], &[0.4, 0.4]).unwrap();
        let second = 0.4 / 0.2 * (0.1 / (6.0 * 0.2 * 0.6));
        assert!((b[0] - (0.1 / 0.24 + second)).abs() < 1e-12);
        assert!(guan_hu_alpha(&[0.1], &[6.0], &[0.0], &[0.0]).is_err());
        // with a unit horizon factor the one-asset allocation is mu/sigma^2
        let g = 6.0;
        let z = zhou_li_alpha(&[0.12], &[vec![0.2]], g, 0.0, 1.0, 1.0, g / 2.0 - 1.0).unwrap();
        let h = guan_hu_alpha(&[0.12], &[g], &[0.2], &[0.0]).unwrap();
        assert!((z[0] / g - h[0]).abs() < 1e-12);
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(rel_error(1.0, 1.0).unwrap(), 0.0);
        assert!((rel_error(2.0, 1.0).unwrap() - 50.0).abs() < 1e-12);
        let e = rel_error(1.0565812, 1.056400).unwrap();
        assert!((e - 0.017).abs() < 0.0005, "{e}");
        assert!(matches!(rel_error(0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn polyfit_recovers_a_quartic() {
        let c = [1.0, -2.0, 0.5, 0.25, -0.125];
        let x: Vec<f64> = (0..9).map(|i| 0.5 + i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|&v| c.iter().rev().fold(0.0, |a, k| a * v + k)).collect();
        let fit = polyfit(&x, &y, 4).unwrap();
        for (a, b) in fit.iter().zip(c) {
            assert!((a - b).abs() < 1e-8, "{fit:?}");
        }
        assert!(matches!(polyfit(&x[..4], &y[..4], 4), Err(Error::Config(_))));
    }

    #[test]
    fn frontier_flags_identical_points() {
        let f = efficient_frontier(&[1.0, 2.0, 3.0, 4.0, 5.0], |_| Objective::from_samples(&[1.0, 2.0], 0.0)).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.points.len(), 5);
        assert!(f.eval_fit(0.5).is_none());
        assert!(matches!(efficient_frontier(&[1.0, 2.0], |_| unreachable!()), Err(Error::Config(_))));
    }

    #[test]
    fn holding_has_zero_sharpe() {
        let w = vec![vec![1.0, 1.2, 0.9]];
        let r = sharpe(&w, &w, &[1.0], &[Cohort::Long]).unwrap();
        assert_eq!(r.ratios[0], Some(0.0));
        assert_eq!(r.long_mean, Some(0.0));
        assert_eq!(r.short_mean, None);
        let flat = sharpe(&[vec![1.0, 1.0]], &[vec![1.0, 1.1]], &[1.0], &[Cohort::Long]).unwrap();
        assert_eq!(flat.ratios[0], None);
    }

    #[test]
    fn dp_oracle_examples() {
        let mut s = spec(0.0, 0.0, 0.0, 0.1);
        let one = ControlGrid::from_values(vec![-1.0]).unwrap();
        let sol = dp_oracle(&s, &one, 3, -1.0).unwrap();
        assert_eq!(sol.controls, vec![0, 0, 0]);
        // no impact, mu = r: every sequence ties, the first one wins
        s.agents[0].kappa_tau = vec![0.0];
        let g = ControlGrid::uniform(-2.0, 0.0, 3, 1.0).unwrap();
        assert_eq!(dp_oracle(&s, &g, 2, -1.0).unwrap().controls, vec![0, 0]);
        assert!(matches!(dp_oracle(&s, &ControlGrid::uniform(-2.0, 0.0, 11, 1.0).unwrap(), 4, -1.0), Err(Error::TooLarge(14641))));
    }

    #[test]
    fn dp_oracle_matches_a_hand_simulation() {
        let s = spec(0.0, 0.0, 0.0, 0.1);
        let g = ControlGrid::uniform(-1.0, 0.0, 3, 1.0).unwrap();
        let sol = dp_oracle(&s, &g, 2, -1.0).unwrap();
        // hand simulation of (-0.5, -0.5): sell half each step at exp(-0.05)
        let dt = 0.5;
        let mut b = 0.0;
        b += 0.5 * (-0.05f64).exp() * dt;
        b += 0.5 * (-0.05f64).exp() * dt;
        let by_hand = bsde::terminal_utility(b, 1.0, -1.0);
        assert!(sol.value >= by_hand - 1e-15);
        let tree = bsde::solve_tree(&s, &g, 2, -1.0).unwrap();
        assert!((tree.value - sol.value).abs() < 1e-8);
        assert_eq!(tree.controls, sol.controls);
    }

    proptest! {
        #[test]
        fn flipping_excess_returns_flips_sharpe(
            xs in prop::collection::vec(0.5f64..1.5, 3..20),
            h in prop::collection::vec(0.5f64..1.5, 3..20),
        ) {
            let hold_mean = h.iter().sum::<f64>() / h.len() as f64;
            let flipped: Vec<f64> = xs.iter().map(|x| 2.0 * hold_mean - x).collect();
            let a = sharpe(&[xs.clone()], &[h.clone()], &[1.0], &[Cohort::Long]).unwrap();
            let b = sharpe(&[flipped], &[h], &[1.0], &[Cohort::Long]).unwrap();
            if let (Some(p), Some(q)) = (a.ratios[0], b.ratios[0]) {
                prop_assert!((p + q).abs() < 1e-9 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn cohort_means_are_member_means(v in prop::collection::vec(prop::collection::vec(0.5f64..1.5, 4), 2..8)) {
            let k = v.len();
            let hold = vec![vec![1.0; 4]; k];
            let cohorts: Vec<Cohort> = (0..k).map(|j| if j % 3 == 0 { Cohort::Short } else { Cohort::Long }).collect();
            let r = sharpe(&v, &hold, &vec![1.0; k], &cohorts).unwrap();
            let longs: Vec<f64> = (0..k).filter(|j| j % 3 != 0).filter_map(|j| r.ratios[j]).collect();
            if !longs.is_empty() {
                let m = longs.iter().sum::<f64>() / longs.len() as f64;
                prop_assert!((r.long_mean.unwrap() - m).abs() < 1e-12);
            }
        }
    }
}
