//! Multi-agent, multi-asset Almgren-Chriss dynamics on an Euler grid.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Ratio of the terminal liquidation interval to the time step.
pub const LIQUIDATION_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSpec {
    /// drift per year
    pub mu: f64,
    /// volatility per sqrt(year)
    pub sigma: f64,
    pub s0: f64,
    /// bid-ask spread
    #[serde(default)]
    pub kappa_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub gamma: f64,
    /// weight on the cross-agent mean wealth in the agent's benchmark
    #[serde(default)]
    pub phi: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub b0: f64,
    /// initial holdings per asset
    pub alpha0: Vec<f64>,
    /// permanent impact per asset
    pub kappa_p: Vec<f64>,
    /// temporary impact per asset
    pub kappa_tau: Vec<f64>,
}

fn default_beta() -> f64 {
    1.0
}

/// Full market and agent parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub r: f64,
    /// horizon in years
    pub horizon: f64,
    pub assets: Vec<AssetSpec>,
    pub agents: Vec<AgentSpec>,
    /// asset correlation; identity when omitted
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
}

impl MarketSpec {
    pub fn d(&self) -> usize {
        self.assets.len()
    }

    pub fn k(&self) -> usize {
        self.agents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 || self.k() == 0 {
            return Err(Error::Config("need at least one asset and one agent".into()));
        }
        if !(self.horizon > 0.0) || !self.r.is_finite() {
            return Err(Error::Config(format!("horizon {} must be positive", self.horizon)));
        }
        for (i, a) in self.assets.iter().enumerate() {
            if !(a.sigma >= 0.0) || !a.mu.is_finite() || !a.s0.is_finite() || !a.kappa_s.is_finite() {
                return Err(Error::Config(format!("asset {i}: invalid mu/sigma/s0/kappa_s")));
            }
        }
        for (k, ag) in self.agents.iter().enumerate() {
            if !(ag.gamma > 0.0) {
                return Err(Error::Config(format!("agent {k}: gamma must be positive")));
            }
            if !(0.0..1.0).contains(&ag.phi) {
                return Err(Error::Config(format!("agent {k}: phi must lie in [0, 1)")));
            }
            if !(ag.beta > 0.0) {
                return Err(Error::Config(format!("agent {k}: beta must be positive")));
            }
            if ag.alpha0.len() != d || ag.kappa_p.len() != d || ag.kappa_tau.len() != d {
                return Err(Error::Dimension(format!(
                    "agent {k}: per-asset vectors must have length {d}"
                )));
            }
        }
        cholesky(&self.correlation_matrix())?;
        Ok(())
    }

    pub fn correlation_matrix(&self) -> Vec<Vec<f64>> {
        match &self.correlation {
            Some(c) => c.clone(),
            None => {
                let d = self.d();
                (0..d)
                    .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect()
            }
        }
    }

    pub fn initial_state(&self) -> State {
        let (d, k) = (self.d(), self.k());
        let mut alpha = vec![0.0; d * k];
        for (kk, ag) in self.agents.iter().enumerate() {
            for i in 0..d {
                alpha[i * k + kk] = ag.alpha0[i];
            }
        }
        State {
            s: self.assets.iter().map(|a| a.s0).collect(),
            b: self.agents.iter().map(|a| a.b0).collect(),
            alpha,
        }
    }

    /// Execution-price multiplier of agent `k` trading asset `i` at rate `v`.
    pub fn impact_multiplier(&self, i: usize, k: usize, v: f64) -> Result<f64> {
        let ag = &self.agents[k];
        temporary_impact(v, self.assets[i].kappa_s, ag.kappa_tau[i], ag.beta)
    }

    /// One Euler step. `v[i*K + k]` are trade rates, `fmul` the matching
    /// execution multipliers, `dw[i]` the correlated Brownian increments.
    pub fn step_into(&self, st: &State, v: &[f64], fmul: &[f64], dw: &[f64], dt: f64, out: &mut State) {
        let (d, k) = (self.d(), self.k());
        let growth = 1.0 + self.r * dt;
        for kk in 0..k {
            out.b[kk] = growth * st.b[kk];
        }
        for i in 0..d {
            let a = &self.assets[i];
            let mut drift = a.mu - self.r;
            for kk in 0..k {
                let idx = i * k + kk;
                drift += permanent_impact(v[idx], self.agents[kk].kappa_p[i]);
                out.b[kk] -= v[idx] * st.s[i] * fmul[idx] * dt;
                out.alpha[idx] = st.alpha[idx] + v[idx] * dt;
            }
            out.s[i] = (1.0 + drift * dt) * st.s[i] + a.sigma * st.s[i] * dw[i];
        }
    }

    /// Forced sale of all remaining holdings over `dT = dt * 1e-3`; returns
    /// each agent's terminal wealth.
    pub fn terminal_liquidation(&self, st: &State, dt: f64) -> Result<Vec<f64>> {
        let (d, k) = (self.d(), self.k());
        let dtl = dt * LIQUIDATION_FRACTION;
        let mut out = Vec::with_capacity(k);
        for kk in 0..k {
            let mut b = (1.0 + self.r * dtl) * st.b[kk];
            for i in 0..d {
                let a = st.alpha[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let vt = -a / dtl;
                let f = self.impact_multiplier(i, kk, vt)?;
                b -= vt * st.s[i] * f * dtl;
            }
            out.push(b);
        }
        Ok(out)
    }

    /// Terminal wealth relative to the benchmark: `X_k - phi_k * mean(X)`.
    pub fn relative_wealth(&self, x: &[f64]) -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter()
            .zip(&self.agents)
            .map(|(xk, ag)| xk - ag.phi * mean)
            .collect()
    }

    /// Initial wealth of each agent, `b0 + sum_i alpha0_i s0_i`.
    pub fn initial_wealth(&self) -> Vec<f64> {
        self.agents
            .iter()
            .map(|ag| {
                ag.b0
                    + ag.alpha0
                        .iter()
                        .zip(&self.assets)
                        .map(|(a, s)| a * s.s0)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Prices, bank accounts and holdings (`alpha[i*K + k]`) at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl State {
    pub fn wealth(&self, k_count: usize) -> Vec<f64> {
        let d = self.s.len();
        (0..k_count)
            .map(|k| self.b[k] + (0..d).map(|i| self.alpha[i * k_count + k] * self.s[i]).sum::<f64>())
            .collect()
    }
}

/// Linear permanent impact `g(v) = kappa_p * v`.
pub fn permanent_impact(v: f64, kappa_p: f64) -> f64 {
    kappa_p * v
}

/// Temporary impact `f(v) = (1 + kappa_s sign v) exp(kappa_tau v^beta)` with
/// `sign(0) = 0`.
pub fn temporary_impact(v: f64, kappa_s: f64, kappa_tau: f64, beta: f64) -> Result<f64> {
    let sign = if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    };
    let pow = if beta == 1.0 {
        v
    } else if beta.fract() == 0.0 && beta.abs() < i32::MAX as f64 {
        v.powi(beta as i32)
    } else if v < 0.0 {
        return Err(Error::Config(format!(
            "non-integer impact exponent {beta} with negative trade rate"
        )));
    } else {
        v.powf(beta)
    };
    Ok((1.0 + kappa_s * sign) * (kappa_tau * pow).exp())
}

/// Lower Cholesky factor of a symmetric positive definite matrix with unit
/// diagonal.
pub fn cholesky(rho: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = rho.len();
    for (i, row) in rho.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Dimension(format!("correlation row {i} has length {}", row.len())));
        }
        if (row[i] - 1.0).abs() > 1e-12 {
            return Err(Error::NotSpd);
        }
        for j in 0..i {
            if (row[j] - rho[j][i]).abs() > 1e-12 {
                return Err(Error::NotSpd);
            }
        }
    }
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
            if i == j {
                let diag = rho[i][i] - s;
                if !(diag > 0.0) {
                    return Err(Error::NotSpd);
                }
                l[i][i] = diag.sqrt();
            } else {
                l[i][j] = (rho[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// `dW = L z sqrt(dt)` for one vector of independent standard normals.
pub fn correlate(z: &[f64], l: &[Vec<f64>], dt: f64) -> Vec<f64> {
    let sq = dt.sqrt();
    l.iter()
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() * sq)
        .collect()
}

/// Correlated Brownian increments `dw[(n*M + m)*d + i]`. Each path draws from
/// its own ChaCha stream, so paths are stable when `M` changes.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub dw: Vec<f64>,
}

impl Noise {
    pub fn generate(spec: &MarketSpec, n: usize, m: usize, seed: u64) -> Result<Self> {
        let d = spec.d();
        let dt = spec.horizon / n as f64;
        let l = cholesky(&spec.correlation_matrix())?;
        let mut dw = vec![0.0; n * m * d];
        let mut z = vec![0.0; d];
        for p in 0..m {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            for step in 0..n {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                let w = correlate(&z, &l, dt);
                dw[(step * m + p) * d..(step * m + p + 1) * d].copy_from_slice(&w);
            }
        }
        Ok(Self { n, m, d, dw })
    }

    pub fn at(&self, step: usize, path: usize) -> &[f64] {
        let o = (step * self.m + path) * self.d;
        &self.dw[o..o + self.d]
    }

    /// All-zero increments, for deterministic dynamics.
    pub fn zero(n: usize, m: usize, d: usize) -> Self {
        Self { n, m, d, dw: vec![0.0; n * m * d] }
    }
}

/// Uniform grid of admissible trade rates, stored in units of 1/year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    values: Vec<f64>,
}

impl ControlGrid {
    /// `c` points from `lo/T` to `hi/T`.
    pub fn uniform(lo: f64, hi: f64, c: usize, horizon: f64) -> Result<Self> {
        if c == 0 || !(horizon > 0.0) {
            return Err(Error::Config("grid needs at least one point".into()));
        }
        if c == 1 {
            return Self::from_values(vec![lo / horizon]);
        }
        if !(hi > lo) {
            return Err(Error::Config(format!("grid bounds [{lo}, {hi}] are not increasing")));
        }
        let values = (0..c)
            .map(|j| (lo + (hi - lo) * j as f64 / (c - 1) as f64) / horizon)
            .collect();
        Self::from_values(values)
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.windows(2).any(|w| !(w[1] > w[0])) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("control grid must be finite and strictly increasing".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sell_only(&self) -> bool {
        self.values.iter().all(|&v| v <= 0.0)
    }

    pub fn buy_only(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    /// On a one-sided grid a trade may close the position but not carry it
    /// through zero; the rate is cut to `-alpha/dt` instead.
    pub fn clip_rate(&self, alpha: f64, v: f64, dt: f64) -> f64 {
        let next = alpha + v * dt;
        if self.sell_only() && next < 0.0 {
            -alpha.max(0.0) / dt
        } else if self.buy_only() && next > 0.0 {
            -alpha.min(0.0) / dt
        } else {
            v
        }
    }

    /// Index of the grid value closest to zero (smallest index on ties).
    pub fn hold_index(&self) -> usize {
        let mut best = 0;
        for (j, v) in self.values.iter().enumerate() {
            if v.abs() < self.values[best].abs() {
                best = j;
            }
        }
        best
    }
}

/// Forward paths under constant control columns: column `c` has every agent
/// trade every asset at `grid[c]` for the whole horizon, all columns sharing
/// the same noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SimBatch {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub c: usize,
    pub dt: f64,
    /// `s[((n*M + m)*d + i)*C + c]`
    pub s: Vec<f64>,
    /// `b[((n*M + m)*K + k)*C + c]`
    pub b: Vec<f64>,
    /// `alpha[(((n*M + m)*d + i)*K + k)*C + c]`
    pub alpha: Vec<f64>,
    pub noise: Noise,
    /// `x[((n*M + m)*K + k)*C + c]`
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
}

impl SimBatch {
    pub fn s_at(&self, n: usize, m: usize, i: usize, c: usize) -> f64 {
        self.s[((n * self.m + m) * self.d + i) * self.c + c]
    }

    pub fn b_at(&self, n: usize, m: usize, k: usize, c: usize) -> f64 {
        self.b[((n * self.m + m) * self.k + k) * self.c + c]
    }

    pub fn alpha_at(&self, n: usize, m: usize, i: usize, k: usize, c: usize) -> f64 {
        self.alpha[(((n * self.m + m) * self.d + i) * self.k + k) * self.c + c]
    }

    pub fn x_at(&self, n: usize, m: usize, k: usize, c: usize) -> f64 {
        self.x[((n * self.m + m) * self.k + k) * self.c + c]
    }

    pub fn x_hat_at(&self, n: usize, m: usize, k: usize, c: usize) -> f64 {
        self.x_hat[((n * self.m + m) * self.k + k) * self.c + c]
    }

    /// Long-format dump: `n,m,i,k,c,field,value`; unused indices are blank.
    /// Long-format CSV; every row carries `manifest` in the last column.
    pub fn write_csv<W: Write>(&self, mut w: W, manifest: &str) -> Result<()> {
        writeln!(w, "n,m,i,k,c,field,value,manifest")?;
        for n in 0..=self.n {
            for m in 0..self.m {
                for c in 0..self.c {
                    for i in 0..self.d {
                        writeln!(w, "{n},{m},{i},,{c},S,{:e},{manifest}", self.s_at(n, m, i, c))?;
                        for k in 0..self.k {
                            writeln!(w, "{n},{m},{i},{k},{c},alpha,{:e},{manifest}", self.alpha_at(n, m, i, k, c))?;
                        }
                    }
                    for k in 0..self.k {
                        writeln!(w, "{n},{m},,{k},{c},b,{:e},{manifest}", self.b_at(n, m, k, c))?;
                        writeln!(w, "{n},{m},,{k},{c},X,{:e},{manifest}", self.x_at(n, m, k, c))?;
                        writeln!(w, "{n},{m},,{k},{c},X_hat,{:e},{manifest}", self.x_hat_at(n, m, k, c))?;
                    }
                    if n < self.n {
                        for i in 0..self.d {
                            writeln!(w, "{n},{m},{i},,{c},dW,{:e},{manifest}", self.noise.at(n, m)[i])?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Simulate every constant control column of `grid` over `n` steps and `m`
/// paths under common noise drawn from `seed`.
pub fn generate_batch(spec: &MarketSpec, grid: &ControlGrid, n: usize, m: usize, seed: u64) -> Result<SimBatch> {
    spec.validate()?;
    if n == 0 || m == 0 {
        return Err(Error::Config("N and M must be positive".into()));
    }
    let noise = Noise::generate(spec, n, m, seed)?;
    let (d, k, c) = (spec.d(), spec.k(), grid.len());
    let dt = spec.horizon / n as f64;
    let mut s = vec![0.0; (n + 1) * m * d * c];
    let mut b = vec![0.0; (n + 1) * m * k * c];
    let mut alpha = vec![0.0; (n + 1) * m * d * k * c];
    let mut x = vec![0.0; (n + 1) * m * k * c];
    let mut x_hat = vec![0.0; (n + 1) * m * k * c];
    for col in 0..c {
        let rate = grid.values()[col];
        let v = vec![rate; d * k];
        let mut fmul = vec![0.0; d * k];
        for i in 0..d {
            for kk in 0..k {
                fmul[i * k + kk] = spec.impact_multiplier(i, kk, rate)?;
            }
        }
        for p in 0..m {
            let mut st = spec.initial_state();
            let mut next = st.clone();
            for step in 0..=n {
                for i in 0..d {
                    s[((step * m + p) * d + i) * c + col] = st.s[i];
                    for kk in 0..k {
                        alpha[(((step * m + p) * d + i) * k + kk) * c + col] = st.alpha[i * k + kk];
                    }
                }
                let w = st.wealth(k);
                let wh = spec.relative_wealth(&w);
                for kk in 0..k {
                    let o = ((step * m + p) * k + kk) * c + col;
                    b[o] = st.b[kk];
                    x[o] = w[kk];
                    x_hat[o] = wh[kk];
                }
                if step < n {
                    spec.step_into(&st, &v, &fmul, noise.at(step, p), dt, &mut next);
                    std::mem::swap(&mut st, &mut next);
                }
            }
        }
    }
    Ok(SimBatch { n, m, d, k, c, dt, s, b, alpha, noise, x, x_hat })
}

/// Open-loop trade rates `rates[(n*d + i)*K + k]` for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub rates: Vec<f64>,
}

impl Controls {
    pub fn zeros(n: usize, d: usize, k: usize) -> Self {
        Self { n, d, k, rates: vec![0.0; n * d * k] }
    }

    /// Rates at step `n`, laid out `[i*K + k]`.
    pub fn at(&self, n: usize) -> &[f64] {
        let w = self.d * self.k;
        &self.rates[n * w..(n + 1) * w]
    }

    pub fn at_mut(&mut self, n: usize) -> &mut [f64] {
        let w = self.d * self.k;
        &mut self.rates[n * w..(n + 1) * w]
    }

    /// Holdings implied by the rates, `alpha[(n*d + i)*K + k]` for
    /// `n = 0..=N`.
    pub fn holdings(&self, spec: &MarketSpec) -> Vec<f64> {
        let w = self.d * self.k;
        let dt = spec.horizon / self.n as f64;
        let mut out = spec.initial_state().alpha;
        for n in 0..self.n {
            let next: Vec<f64> = (0..w).map(|j| out[n * w + j] + self.rates[n * w + j] * dt).collect();
            out.extend(next);
        }
        out
    }
}

/// Terminal outcome of a forward simulation, per path.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal {
    pub m: usize,
    pub k: usize,
    pub d: usize,
    /// wealth after forced liquidation, `x[m*K + k]`
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    /// prices at the horizon, `s[m*d + i]`
    pub s: Vec<f64>,
}

impl Terminal {
    pub fn agent_x_hat(&self, k: usize) -> Vec<f64> {
        (0..self.m).map(|p| self.x_hat[p * self.k + k]).collect()
    }

    pub fn agent_x(&self, k: usize) -> Vec<f64> {
        (0..self.m).map(|p| self.x[p * self.k + k]).collect()
    }
}

/// Simulate all paths of `noise` under open-loop `controls`, then liquidate.
pub fn simulate_controls(spec: &MarketSpec, controls: &Controls, noise: &Noise) -> Result<Terminal> {
    let (d, k) = (spec.d(), spec.k());
    if controls.d != d || controls.k != k || controls.n != noise.n || noise.d != d {
        return Err(Error::Dimension("controls, noise and market disagree".into()));
    }
    let n = controls.n;
    let dt = spec.horizon / n as f64;
    let mut fmul = vec![0.0; n * d * k];
    for step in 0..n {
        let v = controls.at(step);
        for i in 0..d {
            for kk in 0..k {
                fmul[step * d * k + i * k + kk] = spec.impact_multiplier(i, kk, v[i * k + kk])?;
            }
        }
    }
    let m = noise.m;
    let mut x = Vec::with_capacity(m * k);
    let mut x_hat = Vec::with_capacity(m * k);
    let mut s = Vec::with_capacity(m * d);
    let init = spec.initial_state();
    let mut st = init.clone();
    let mut next = init.clone();
    for p in 0..m {
        st.clone_from(&init);
        for step in 0..n {
            spec.step_into(&st, controls.at(step), &fmul[step * d * k..(step + 1) * d * k], noise.at(step, p), dt, &mut next);
            std::mem::swap(&mut st, &mut next);
        }
        let w = spec.terminal_liquidation(&st, dt)?;
        x_hat.extend(spec.relative_wealth(&w));
        x.extend(w);
        s.extend_from_slice(&st.s);
    }
    Ok(Terminal { m, k, d, x, x_hat, s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn one_asset(mu: f64, r: f64, sigma: f64, kp: f64, kt: f64) -> MarketSpec {
        MarketSpec {
            r,
            horizon: 1.0,
            assets: vec![AssetSpec { mu, sigma, s0: 100.0, kappa_s: 0.0 }],
            agents: vec![AgentSpec {
                gamma: 1.0,
                phi: 0.0,
                beta: 1.0,
                b0: 0.0,
                alpha0: vec![1.0],
                kappa_p: vec![kp],
                kappa_tau: vec![kt],
            }],
            correlation: None,
        }
    }

    #[test]
    fn permanent_impact_examples() {
        assert_eq!(permanent_impact(0.0, 5e-4), 0.0);
        assert_eq!(permanent_impact(-1.0, 5e-4), -5e-4);
        assert_eq!(permanent_impact(2.0, 0.0), 0.0);
    }

    #[test]
    fn temporary_impact_examples() {
        assert_eq!(temporary_impact(0.0, 0.3, 0.2, 1.0).unwrap(), 1.0);
        assert!((temporary_impact(1.0, 0.01, 0.0, 1.0).unwrap() - 1.01).abs() < 1e-15);
        let f = temporary_impact(-1.0, 0.0, 1e-7, 1.0).unwrap();
        assert!((f - (-1e-7f64).exp()).abs() < 1e-16);
        assert!((f - 0.9999999).abs() < 1e-14);
        assert!(matches!(temporary_impact(-1.0, 0.0, 1e-7, 1.5), Err(Error::Config(_))));
        assert!(temporary_impact(1.0, 0.0, 1e-7, 1.5).is_ok());
        let f2 = temporary_impact(-2.0, 0.0, 0.1, 2.0).unwrap();
        assert!((f2 - 0.4f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_examples() {
        let l = cholesky(&[vec![1.0, 0.7], vec![0.7, 1.0]]).unwrap();
        assert_eq!(l[0], vec![1.0, 0.0]);
        assert!((l[1][0] - 0.7).abs() < 1e-15);
        assert!((l[1][1] - 0.51f64.sqrt()).abs() < 1e-15);
        assert!(matches!(cholesky(&[vec![1.0, 1.5], vec![1.5, 1.0]]), Err(Error::NotSpd)));
        assert!(matches!(cholesky(&[vec![1.0, 0.2], vec![0.3, 1.0]]), Err(Error::NotSpd)));
        let id = cholesky(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = correlate(&[0.3, -1.2], &id, 0.04);
        assert!((w[0] - 0.06).abs() < 1e-15 && (w[1] + 0.24).abs() < 1e-15);
    }

    #[test]
    fn sample_covariance_matches_correlation() {
        let l = cholesky(&[vec![1.0, 0.7], vec![0.7, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let z: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let w = correlate(&z, &l, 1.0);
            s00 += w[0] * w[0];
            s01 += w[0] * w[1];
            s11 += w[1] * w[1];
        }
        let nf = n as f64;
        assert!((s00 / nf - 1.0).abs() < 0.01);
        assert!((s11 / nf - 1.0).abs() < 0.01);
        assert!((s01 / nf - 0.7).abs() < 0.01);
    }

    #[test]
    fn euler_step_hand_value() {
        let spec = one_asset(0.05, 0.05, 0.0, 0.001, 0.0);
        let st = spec.initial_state();
        let mut out = st.clone();
        spec.step_into(&st, &[1.0], &[1.0], &[0.0], 0.01, &mut out);
        assert!((out.s[0] - 100.001).abs() < 1e-12);
        assert!((out.alpha[0] - 1.01).abs() < 1e-15);
        // bank pays S * v * dt
        assert!((out.b[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn idle_market_only_grows_the_bank() {
        let mut spec = one_asset(0.05, 0.05, 0.0, 0.0, 0.0);
        spec.agents[0].b0 = 2.0;
        let mut st = spec.initial_state();
        let mut next = st.clone();
        let dt = 0.1;
        for _ in 0..10 {
            spec.step_into(&st, &[0.0], &[1.0], &[0.0], dt, &mut next);
            std::mem::swap(&mut st, &mut next);
        }
        assert_eq!(st.s[0], 100.0);
        assert_eq!(st.alpha[0], 1.0);
        let mut expect = 2.0;
        for _ in 0..10 {
            expect *= 1.005;
        }
        assert_eq!(st.b[0], expect);
        assert!((st.b[0] - 2.0 * 1.005f64.powi(10)).abs() < 1e-14);
    }

    #[test]
    fn liquidation_examples() {
        let spec = one_asset(0.0, 0.0, 0.0, 0.0, 0.0);
        let mut st = spec.initial_state();
        st.alpha[0] = 0.0;
        st.b[0] = 3.0;
        assert_eq!(spec.terminal_liquidation(&st, 0.01).unwrap(), vec![3.0]);
        st.alpha[0] = 1.0;
        st.b[0] = 0.0;
        let x = spec.terminal_liquidation(&st, 0.01).unwrap();
        assert!((x[0] - 100.0).abs() < 1e-9);
        let spec = one_asset(0.0, 0.0, 0.0, 0.0, 2e-6);
        let x = spec.terminal_liquidation(&st, 0.01).unwrap();
        assert!(x[0] < 100.0);
    }

    #[test]
    fn phi_zero_leaves_wealth_alone() {
        let mut spec = one_asset(0.0, 0.0, 0.0, 0.0, 0.0);
        spec.agents.push(spec.agents[0].clone());
        let x = vec![1.0, 3.0];
        assert_eq!(spec.relative_wealth(&x), x);
        spec.agents[0].phi = 0.5;
        assert_eq!(spec.relative_wealth(&x), vec![0.0, 3.0]);
    }

    #[test]
    fn batches_are_reproducible_and_telescope() {
        let spec = one_asset(0.1, 0.05, 0.2, 1e-3, 1e-4);
        let grid = ControlGrid::uniform(-2.0, 2.0, 5, 1.0).unwrap();
        let a = generate_batch(&spec, &grid, 7, 4, 11).unwrap();
        let b = generate_batch(&spec, &grid, 7, 4, 11).unwrap();
        assert_eq!(a, b);
        for c in 0..5 {
            for m in 0..4 {
                let moved = a.alpha_at(7, m, 0, 0, c) - a.alpha_at(0, m, 0, 0, c);
                assert!((moved - 7.0 * grid.values()[c] * a.dt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paths_are_stable_when_m_grows() {
        let spec = one_asset(0.1, 0.05, 0.2, 0.0, 0.0);
        let small = Noise::generate(&spec, 5, 3, 9).unwrap();
        let big = Noise::generate(&spec, 5, 10, 9).unwrap();
        for n in 0..5 {
            for m in 0..3 {
                assert_eq!(small.at(n, m), big.at(n, m));
            }
        }
    }

    #[test]
    fn single_hold_column_is_pure_hold() {
        let spec = one_asset(0.1, 0.05, 0.2, 1e-3, 1e-4);
        let grid = ControlGrid::from_values(vec![0.0]).unwrap();
        let batch = generate_batch(&spec, &grid, 6, 3, 1).unwrap();
        for m in 0..3 {
            let mut s = 100.0;
            for n in 0..6 {
                assert_eq!(batch.s_at(n, m, 0, 0), s);
                s = (1.0 + 0.05 * batch.dt) * s + 0.2 * s * batch.noise.at(n, m)[0];
            }
            assert_eq!(batch.alpha_at(6, m, 0, 0, 0), 1.0);
        }
    }

    #[test]
    fn gbm_mean_oracle() {
        let spec = one_asset(0.05, 0.05, 0.2, 0.0, 0.0);
        let grid = ControlGrid::from_values(vec![0.0]).unwrap();
        let (n, m) = (10, 100_000);
        let batch = generate_batch(&spec, &grid, n, m, 5).unwrap();
        let mean = (0..m).map(|p| batch.s_at(n, p, 0, 0) / 100.0).sum::<f64>() / m as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.2 / (m as f64).sqrt());
    }

    #[test]
    fn inactive_agent_does_not_move_prices() {
        let mut spec = one_asset(0.1, 0.05, 0.2, 1e-3, 0.0);
        let mut second = spec.agents[0].clone();
        second.kappa_p = vec![0.0];
        spec.agents.push(second);
        let st = spec.initial_state();
        let mut a = st.clone();
        let mut b = st.clone();
        spec.step_into(&st, &[0.5, -3.0], &[1.0, 1.0], &[0.01], 0.1, &mut a);
        spec.step_into(&st, &[0.5, 7.0], &[1.0, 1.0], &[0.01], 0.1, &mut b);
        assert_eq!(a.s, b.s);
    }

    #[test]
    fn grid_rules() {
        let g = ControlGrid::uniform(-10.0, 0.0, 16, 0.5).unwrap();
        assert!(g.sell_only());
        assert_eq!(g.values()[15], 0.0);
        assert_eq!(g.values()[0], -20.0);
        assert_eq!(g.hold_index(), 15);
        assert!(ControlGrid::from_values(vec![1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn agent_relabelling_permutes_outputs(v1 in -5.0f64..5.0, v2 in -5.0f64..5.0, kp1 in 0.0f64..1e-2, kp2 in 0.0f64..1e-2, w in -0.1f64..0.1) {
            let mut spec = one_asset(0.1, 0.05, 0.3, kp1, 1e-3);
            let mut a2 = spec.agents[0].clone();
            a2.kappa_p = vec![kp2];
            a2.b0 = 5.0;
            spec.agents.push(a2);
            let mut swapped = spec.clone();
            swapped.agents.swap(0, 1);
            let st = spec.initial_state();
            let st2 = swapped.initial_state();
            let f = |s: &MarketSpec, v: &[f64]| -> Vec<f64> { (0..2).map(|k| s.impact_multiplier(0, k, v[k]).unwrap()).collect() };
            let mut o1 = st.clone();
            let mut o2 = st2.clone();
            spec.step_into(&st, &[v1, v2], &f(&spec, &[v1, v2]), &[w], 0.01, &mut o1);
            swapped.step_into(&st2, &[v2, v1], &f(&swapped, &[v2, v1]), &[w], 0.01, &mut o2);
            prop_assert!((o1.s[0] - o2.s[0]).abs() < 1e-12);
            prop_assert_eq!(o1.b[0], o2.b[1]);
            prop_assert_eq!(o1.b[1], o2.b[0]);
        }

        #[test]
        fn zero_impact_is_neutral(v in -100.0f64..100.0) {
            prop_assert_eq!(temporary_impact(v, 0.0, 0.0, 1.0).unwrap(), 1.0);
            prop_assert_eq!(permanent_impact(v, 0.0), 0.0);
        }
    }

    #[test]
    fn one_sided_grids_stop_at_zero() {
        let sell = ControlGrid::uniform(-2.0, 0.0, 3, 1.0).unwrap();
        assert_eq!(sell.clip_rate(1.0, -2.0, 0.25), -2.0);
        assert_eq!(sell.clip_rate(0.3, -2.0, 0.25), -0.3 / 0.25);
        assert_eq!(sell.clip_rate(-0.5, -1.0, 0.25), 0.0);
        let buy = ControlGrid::uniform(0.0, 2.0, 3, 1.0).unwrap();
        assert_eq!(buy.clip_rate(-0.2, 2.0, 0.25), 0.2 / 0.25);
        let both = ControlGrid::uniform(-2.0, 2.0, 3, 1.0).unwrap();
        assert_eq!(both.clip_rate(0.1, -2.0, 0.25), -2.0);
    }

    #[test]
    fn holdings_accumulate_rates() {
        let spec = one_asset(0.0, 0.0, 0.2, 0.0, 0.0);
        let mut c = Controls::zeros(4, 1, 1);
        for (n, v) in [-1.0, -2.0, 0.0, 1.0].iter().enumerate() {
            c.at_mut(n)[0] = *v;
        }
        let a = c.holdings(&spec);
        let want = [1.0, 0.75, 0.25, 0.25, 0.5];
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_controls_match_the_batch_columns() {
        let spec = one_asset(0.1, 0.05, 0.2, 1e-3, 1e-4);
        let grid = ControlGrid::uniform(-2.0, 0.0, 3, 1.0).unwrap();
        let batch = generate_batch(&spec, &grid, 5, 7, 11).unwrap();
        let noise = Noise::generate(&spec, 5, 7, 11).unwrap();
        for c in 0..3 {
            let mut ctl = Controls::zeros(5, 1, 1);
            for n in 0..5 {
                ctl.at_mut(n)[0] = grid.values()[c];
            }
            let t = simulate_controls(&spec, &ctl, &noise).unwrap();
            for m in 0..7 {
                assert_eq!(t.s[m], batch.s_at(5, m, 0, c));
            }
        }
    }
}
