//! Discretized BSDE terms, the least-squares residual and the backward
//! recursion over control columns.

use crate::error::{Error, Result};
use crate::market::{ControlGrid, MarketSpec, State};
use log::warn;
use serde::{Deserialize, Serialize};

/// `(1 - gamma psi) x - gamma/2 x^2`.
pub fn terminal_utility(x_hat: f64, gamma: f64, psi: f64) -> f64 {
    (1.0 - gamma * psi) * x_hat - 0.5 * gamma * x_hat * x_hat
}

/// Terminal value samples for one agent.
pub fn terminal_condition(x_hat: &[f64], gamma: f64, psi: f64) -> Vec<f64> {
    x_hat.iter().map(|&x| terminal_utility(x, gamma, psi)).collect()
}

/// Slope of the terminal utility at `x`.
pub fn terminal_slope(x_hat: f64, gamma: f64, psi: f64) -> f64 {
    1.0 - gamma * psi - gamma * x_hat
}

/// Forward-difference bump sizes at a given state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpRule {
    pub rel: f64,
}

impl Default for BumpRule {
    fn default() -> Self {
        Self { rel: 1e-3 }
    }
}

impl BumpRule {
    pub fn price(&self, s: f64, s0: f64) -> f64 {
        self.rel * s.abs().max(s0.abs()).max(f64::MIN_POSITIVE)
    }

    pub fn bank(&self, b: f64) -> f64 {
        self.rel * b.abs().max(1.0)
    }

    pub fn holding(&self, a: f64) -> f64 {
        self.rel * a.abs().max(1.0)
    }
}

/// Which partial derivatives to form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivativeSet {
    pub price: bool,
    pub bank: bool,
    pub holding: bool,
}

impl DerivativeSet {
    pub const ALL: Self = Self { price: true, bank: true, holding: true };
    pub const PRICE: Self = Self { price: true, bank: false, holding: false };
}

/// Forward-difference partials of a value function at one state, with respect
/// to every price, and agent `k`'s own bank account and holdings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DerivativeBundle {
    pub d_s: Vec<f64>,
    pub d_b: f64,
    pub d_alpha: Vec<f64>,
}

/// One-sided quotients `(U(x + h e) - U(x)) / h` by re-evaluating `value_fn`.
pub fn state_derivatives<F>(
    value_fn: F,
    state: &State,
    agent: usize,
    s0: &[f64],
    bumps: BumpRule,
    which: DerivativeSet,
) -> Result<DerivativeBundle>
where
    F: Fn(&State) -> Result<f64>,
{
    let d = state.s.len();
    let k_count = state.b.len();
    let base = value_fn(state)?;
    let mut out = DerivativeBundle {
        d_s: vec![0.0; d],
        d_b: 0.0,
        d_alpha: vec![0.0; d],
    };
    let mut work = state.clone();
    if which.price {
        for i in 0..d {
            let h = bumps.price(state.s[i], s0[i]);
            work.s[i] = state.s[i] + h;
            out.d_s[i] = (value_fn(&work)? - base) / h;
            work.s[i] = state.s[i];
        }
    }
    if which.bank {
        let h = bumps.bank(state.b[agent]);
        work.b[agent] = state.b[agent] + h;
        out.d_b = (value_fn(&work)? - base) / h;
        work.b[agent] = state.b[agent];
    }
    if which.holding {
        for i in 0..d {
            let idx = i * k_count + agent;
            let h = bumps.holding(state.alpha[idx]);
            work.alpha[idx] = state.alpha[idx] + h;
            out.d_alpha[i] = (value_fn(&work)? - base) / h;
            work.alpha[idx] = state.alpha[idx];
        }
    }
    Ok(out)
}

/// Driver of the backward equation for agent `k` in the performance-aware
/// form, with `b_bar` and `v_bar` cross-agent means:
///
/// `f = -r (b_k - phi b_bar) D_b + sum_i v_ik f_ik(v_ik) S_i D_b
///      - sum_i (v_ik - phi v_bar_i) D_alpha_i - sum_i g_i(sum_k v) S_i D_S_i`
pub fn bsde_drift(spec: &MarketSpec, state: &State, v: &[f64], agent: usize, der: &DerivativeBundle) -> Result<f64> {
    let (d, k_count) = (spec.d(), spec.k());
    if v.len() != d * k_count || der.d_s.len() != d || der.d_alpha.len() != d {
        return Err(Error::Dimension("drift inputs do not match the market".into()));
    }
    let phi = spec.agents[agent].phi;
    let b_bar = state.b.iter().sum::<f64>() / k_count as f64;
    let mut f = -spec.r * (state.b[agent] - phi * b_bar) * der.d_b;
    for i in 0..d {
        let vik = v[i * k_count + agent];
        let v_bar = (0..k_count).map(|k| v[i * k_count + k]).sum::<f64>() / k_count as f64;
        let g: f64 = (0..k_count)
            .map(|k| spec.agents[k].kappa_p[i] * v[i * k_count + k])
            .sum();
        f += vik * spec.impact_multiplier(i, agent, vik)? * state.s[i] * der.d_b;
        f -= (vik - phi * v_bar) * der.d_alpha[i];
        f -= g * state.s[i] * der.d_s[i];
    }
    Ok(f)
}

/// `Z = sum_i sigma_i S_i D_S_i dW_i`.
pub fn diffusion_term(d_s: &[f64], sigma: &[f64], s: &[f64], dw: &[f64]) -> f64 {
    d_s.iter()
        .zip(sigma)
        .zip(s)
        .zip(dw)
        .map(|(((ds, sg), si), w)| sg * si * ds * w)
        .sum()
}

/// Pointwise residual `U_next - (U_hat - f dt + Z)`.
pub fn residual(u_next: f64, u_hat: f64, f: f64, z: f64, dt: f64) -> f64 {
    u_next - (u_hat - f * dt + z)
}

/// Mean squared residual.
pub fn loss(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64
}

/// How the optimal column is chosen at a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// one column for all paths, maximizing the cross-path mean
    Shared(usize),
    /// one column per path
    PerPath(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Shared,
    PerPath,
}

/// Value samples `u[m*C + c]` at one step for one agent with the chosen
/// column(s).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSlice {
    pub m: usize,
    pub c: usize,
    pub u: Vec<f64>,
    pub selection: Selection,
    pub psi: f64,
}

impl ValueSlice {
    /// Build a slice and select its optimal column(s). Ties go to the
    /// smallest index.
    pub fn select(m: usize, c: usize, u: Vec<f64>, mode: SelectionMode, psi: f64) -> Result<Self> {
        if u.len() != m * c || m == 0 || c == 0 {
            return Err(Error::Dimension(format!("value slice {m}x{c} with {} samples", u.len())));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence("non-finite value sample".into()));
        }
        let selection = match mode {
            SelectionMode::Shared => {
                let means = column_means(&u, m, c);
                Selection::Shared(argmax(&means))
            }
            SelectionMode::PerPath => Selection::PerPath((0..m).map(|p| argmax(&u[p * c..(p + 1) * c])).collect()),
        };
        Ok(Self { m, c, u, selection, psi })
    }

    pub fn selected(&self, path: usize) -> usize {
        match &self.selection {
            Selection::Shared(j) => *j,
            Selection::PerPath(v) => v[path],
        }
    }

    /// `U[m, v*]` per path.
    pub fn at_selected(&self) -> Vec<f64> {
        (0..self.m).map(|p| self.u[p * self.c + self.selected(p)]).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        column_means(&self.u, self.m, self.c)
    }
}

pub fn column_means(u: &[f64], m: usize, c: usize) -> Vec<f64> {
    let mut means = vec![0.0; c];
    for row in u.chunks(c) {
        for (a, &x) in means.iter_mut().zip(row) {
            *a += x;
        }
    }
    for a in means.iter_mut() {
        *a /= m as f64;
    }
    means
}

/// Index of the largest value; the smallest index wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = j;
        }
    }
    best
}

/// One backward step: `U^n = U_hat` with `U_hat` built from the carried
/// value `E_{v*}[U^{n+1}]` (one sample per path and column) and the step's
/// increment `f dt - Z`, then a fresh argmax.
pub fn backward_step(
    carried: &[f64],
    increment: &[f64],
    m: usize,
    c: usize,
    mode: SelectionMode,
    psi: f64,
) -> Result<ValueSlice> {
    if carried.len() != m * c || increment.len() != m * c {
        return Err(Error::Dimension("backward step inputs".into()));
    }
    let u = carried.iter().zip(increment).map(|(a, b)| a + b).collect();
    ValueSlice::select(m, c, u, mode, psi)
}

/// Exact backward recursion over the full tree of control sequences for a
/// deterministic single-agent, single-asset market.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSolution {
    pub value: f64,
    pub controls: Vec<usize>,
}

pub fn solve_tree(spec: &MarketSpec, grid: &ControlGrid, n_steps: usize, psi: f64) -> Result<TreeSolution> {
    spec.validate()?;
    if spec.d() != 1 || spec.k() != 1 {
        return Err(Error::Config("tree recursion needs one asset and one agent".into()));
    }
    if spec.assets[0].sigma != 0.0 {
        return Err(Error::Config("tree recursion needs sigma = 0".into()));
    }
    let c = grid.len();
    let leaves = (c as u64).checked_pow(n_steps as u32).unwrap_or(u64::MAX);
    if leaves > 1_000_000 || n_steps == 0 {
        return Err(Error::TooLarge(leaves));
    }
    let dt = spec.horizon / n_steps as f64;
    let fmul: Vec<f64> = grid
        .values()
        .iter()
        .map(|&v| spec.impact_multiplier(0, 0, v))
        .collect::<Result<_>>()?;
    // forward: states per level
    let mut levels = vec![vec![spec.initial_state()]];
    for _ in 0..n_steps {
        let prev = levels.last().unwrap();
        let mut next = Vec::with_capacity(prev.len() * c);
        for st in prev {
            for (j, &v) in grid.values().iter().enumerate() {
                let mut out = st.clone();
                spec.step_into(st, &[v], &[fmul[j]], &[0.0], dt, &mut out);
                next.push(out);
            }
        }
        levels.push(next);
    }
    let gamma = spec.agents[0].gamma;
    let leaf_values: Vec<f64> = levels[n_steps]
        .iter()
        .map(|st| {
            let x = spec.terminal_liquidation(st, dt)?;
            let xh = spec.relative_wealth(&x);
            Ok(terminal_utility(xh[0], gamma, psi))
        })
        .collect::<Result<_>>()?;
    // level n-1 nodes, each with c children
    let mut slice = backward_step(
        &leaf_values,
        &vec![0.0; leaf_values.len()],
        levels[n_steps - 1].len(),
        c,
        SelectionMode::PerPath,
        psi,
    )?;
    let mut slices = vec![slice.clone()];
    for n in (0..n_steps - 1).rev() {
        let nodes = levels[n].len();
        let carried = slice.at_selected();
        slice = backward_step(&carried, &vec![0.0; nodes * c], nodes, c, SelectionMode::PerPath, psi)?;
        slices.push(slice.clone());
    }
    slices.reverse();
    let mut controls = Vec::with_capacity(n_steps);
    let mut node = 0usize;
    for s in &slices {
        let j = s.selected(node);
        controls.push(j);
        node = node * c + j;
    }
    let value = slices[0].u[controls[0]];
    Ok(TreeSolution { value, controls })
}

/// Result of the dual-variable iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiFixedPoint {
    pub psi: f64,
    /// `U - gamma/2 psi^2` at the returned `psi`
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// What one solve at a given `psi` reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiSolve {
    pub mean_x_hat: f64,
    /// value of the auxiliary problem at t = 0
    pub value: f64,
}

/// Iterate `psi <- -E[X_hat(T)]` from `psi0` until successive iterates differ
/// by less than `tol`.
pub fn psi_fixed_point<F>(mut solve: F, psi0: f64, gamma: f64, tol: f64, max_iter: usize) -> Result<PsiFixedPoint>
where
    F: FnMut(f64) -> Result<PsiSolve>,
{
    let mut psi = psi0;
    let mut history = vec![psi];
    let mut out = solve(psi)?;
    for it in 0..max_iter {
        let next = -out.mean_x_hat;
        if (next - psi).abs() < tol {
            return Ok(PsiFixedPoint {
                psi,
                value: out.value - 0.5 * gamma * psi * psi,
                iterations: it,
                converged: true,
                history,
            });
        }
        psi = next;
        history.push(psi);
        out = solve(psi)?;
    }
    warn!("psi iteration did not converge in {max_iter} steps; last iterate {psi}");
    Ok(PsiFixedPoint {
        psi,
        value: out.value - 0.5 * gamma * psi * psi,
        iterations: max_iter,
        converged: false,
        history,
    })
}
