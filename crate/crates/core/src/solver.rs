//! Backward-in-time training of the per-agent value networks, ensemble
//! inference and the outer dual-variable loop.
//!
//! The policy is open-loop: one grid index per (step, agent, asset), chosen
//! by the argmax of the cross-path mean of `U_hat`. Each epoch sweeps
//! `n = N-1 .. 0` per agent; for every control column the path is branched
//! at step `n` and rolled forward under the current later policy. The carried
//! value is the terminal utility minus the future diffusion terms, which are
//! taken from a pathwise adjoint of the linearized terminal wealth.

use crate::autograd::{Adam, Array, Tape};
use crate::bsde::{self, BumpRule, DerivativeSet, SelectionMode, ValueSlice};
use crate::error::{Error, Result};
use crate::market::{ControlGrid, Controls, MarketSpec, Noise, State};
use crate::net::{Checkpoint, NetConfig, Network, Normalizer, TrainingMeta};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// How the driver `f` of the backward equation is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// control costs are realized inside the branched rollout, so `f = 0`
    #[default]
    Realized,
    /// `f` from the closed-form driver with bump derivatives of the
    /// continuation value
    Display,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_c_base")]
    pub c_base: usize,
    #[serde(default = "d_levels")]
    pub levels: usize,
    #[serde(default = "d_kernel")]
    pub kernel: usize,
    #[serde(default = "d_groups")]
    pub groups: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            heads: d_heads(),
            c_base: d_c_base(),
            levels: d_levels(),
            kernel: d_kernel(),
            groups: d_groups(),
        }
    }
}

fn d_heads() -> usize {
    4
}
fn d_c_base() -> usize {
    16
}
fn d_levels() -> usize {
    4
}
fn d_kernel() -> usize {
    3
}
fn d_groups() -> usize {
    4
}
fn d_train_paths() -> usize {
    128
}
fn d_max_epochs() -> usize {
    5000
}
fn d_one() -> usize {
    1
}
fn d_patience() -> usize {
    2
}
fn d_threshold() -> f64 {
    5e-6
}
fn d_lr() -> f64 {
    1e-4
}
fn d_psi_tol() -> f64 {
    1e-6
}
fn d_psi_iter() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// time steps N
    pub steps: usize,
    /// simulated paths M
    pub paths: usize,
    /// paths per gradient evaluation at each step
    #[serde(default = "d_train_paths")]
    pub train_paths: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_one")]
    pub min_epochs: usize,
    /// epochs without a policy change before stopping
    #[serde(default = "d_patience")]
    pub policy_patience: usize,
    #[serde(default = "d_threshold")]
    pub loss_threshold: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_one")]
    pub ensemble: usize,
    /// taken from the run configuration
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "d_psi_tol")]
    pub psi_tol: f64,
    #[serde(default = "d_psi_iter")]
    pub psi_max_iter: usize,
    #[serde(default)]
    pub net: NetShape,
    #[serde(default)]
    pub drift: DriftMode,
    /// backward sweeps during inference
    #[serde(default = "d_one")]
    pub infer_sweeps: usize,
}

impl SolverConfig {
    pub fn new(steps: usize, paths: usize) -> Self {
        Self {
            steps,
            paths,
            train_paths: d_train_paths(),
            max_epochs: d_max_epochs(),
            min_epochs: 1,
            policy_patience: d_patience(),
            loss_threshold: d_threshold(),
            learning_rate: d_lr(),
            ensemble: 1,
            seed: 0,
            psi_tol: d_psi_tol(),
            psi_max_iter: d_psi_iter(),
            net: NetShape::default(),
            drift: DriftMode::Realized,
            infer_sweeps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.paths == 0 || self.train_paths == 0 {
            return Err(Error::Config("steps, paths and train_paths must be positive".into()));
        }
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if !(self.loss_threshold > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("loss threshold and learning rate must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic seed derivation.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TRAIN_NOISE: u64 = 1;
const TAG_EVAL_NOISE: u64 = 2;
const TAG_NET: u64 = 3;

/// Seed of the fresh evaluation paths for a run seed.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, TAG_EVAL_NOISE)
}

/// Grid index per `(step, agent, asset)`, stored `idx[(n*K + k)*d + i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub idx: Vec<usize>,
}

impl Policy {
    /// Trade each starting position down at the grid rate closest to a
    /// uniform liquidation over the horizon.
    pub fn liquidating(spec: &MarketSpec, grids: &[ControlGrid], n: usize) -> Self {
        let (k, d) = (spec.k(), spec.d());
        let mut idx = Vec::with_capacity(n * k * d);
        for _ in 0..n {
            for (kk, ag) in spec.agents.iter().enumerate() {
                for i in 0..d {
                    let target = -ag.alpha0[i] / spec.horizon;
                    idx.push(nearest(grids[kk].values(), target));
                }
            }
        }
        Self { n, k, d, idx }
    }

    pub fn get(&self, n: usize, k: usize, i: usize) -> usize {
        self.idx[(n * self.k + k) * self.d + i]
    }

    pub fn set(&mut self, n: usize, k: usize, i: usize, v: usize) {
        self.idx[(n * self.k + k) * self.d + i] = v;
    }

    /// Trade rates of the policy. On one-sided grids a rate that would
    /// carry the position through zero is cut to close it exactly.
    pub fn to_controls(&self, spec: &MarketSpec, grids: &[ControlGrid]) -> Controls {
        let mut c = Controls::zeros(self.n, self.d, self.k);
        let mut alpha = spec.initial_state().alpha;
        let dt = spec.horizon / self.n as f64;
        for n in 0..self.n {
            for kk in 0..self.k {
                for i in 0..self.d {
                    let g = &grids[kk];
                    let j = i * self.k + kk;
                    let v = g.clip_rate(alpha[j], g.values()[self.get(n, kk, i)], dt);
                    c.at_mut(n)[j] = v;
                    alpha[j] += v * dt;
                }
            }
        }
        c
    }

    /// Indices of agent `k` as `[step][asset]`.
    pub fn agent_rows(&self, k: usize) -> Vec<Vec<usize>> {
        (0..self.n).map(|n| (0..self.d).map(|i| self.get(n, k, i)).collect()).collect()
    }
}

fn nearest(values: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if (v - target).abs() < (values[best] - target).abs() {
            best = j;
        }
    }
    best
}

/// Agents with identical parameters and grids share one trained network;
/// returns the representative of each agent.
pub fn agent_classes(spec: &MarketSpec, grids: &[ControlGrid]) -> Vec<usize> {
    let mut rep = Vec::with_capacity(spec.k());
    for k in 0..spec.k() {
        let r = (0..k)
            .find(|&j| spec.agents[j] == spec.agents[k] && grids[j] == grids[k])
            .unwrap_or(k);
        rep.push(r);
    }
    rep
}

/// Number of network input features for `d` assets.
pub fn feature_count(d: usize) -> usize {
    3 * d + 5
}

/// Arithmetic mean across ensemble members.
pub fn ensemble_aggregate(values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = values.first().ok_or_else(|| Error::Config("empty ensemble".into()))?;
    if values.iter().any(|v| v.len() != first.len()) {
        return Err(Error::Dimension("ensemble members disagree in size".into()));
    }
    let e = values.len() as f64;
    Ok((0..first.len())
        .map(|j| values.iter().map(|v| v[j]).sum::<f64>() / e)
        .collect())
}

/// States along the reference policy, flattened over `(n, m)`.
struct Reference {
    m: usize,
    d: usize,
    k: usize,
    s: Vec<f64>,
    b: Vec<f64>,
    a: Vec<f64>,
}

impl Reference {
    fn state(&self, n: usize, p: usize, out: &mut State) {
        let o = n * self.m + p;
        out.s.copy_from_slice(&self.s[o * self.d..(o + 1) * self.d]);
        out.b.copy_from_slice(&self.b[o * self.k..(o + 1) * self.k]);
        let w = self.d * self.k;
        out.alpha.copy_from_slice(&self.a[o * w..(o + 1) * w]);
    }
}

/// Pathwise continuation from a branched state.
#[derive(Debug, Clone, Copy)]
struct Continuation {
    /// terminal utility minus the diffusion terms after the branch point
    carried: f64,
}

struct Scratch {
    s_hist: Vec<f64>,
    lam_s: Vec<f64>,
    lam_b: Vec<f64>,
    st: State,
    next: State,
}

/// Everything shared by the sweeps of one run.
pub struct Engine<'a> {
    spec: &'a MarketSpec,
    grids: &'a [ControlGrid],
    noise: &'a Noise,
    n: usize,
    m: usize,
    dt: f64,
    drift: DriftMode,
}

/// Per-step, per-asset output of a sweep.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub slice: ValueSlice,
    /// residual sum of squares of the training targets before the update
    pub loss: f64,
}

/// Networks used to evaluate the correction `F` during a sweep.
enum Approx<'n> {
    Train { net: &'n mut Network, grads: &'n mut Vec<Array>, rows: Vec<usize>, calibrate: bool },
    Frozen(Vec<&'n Network>),
}

impl<'a> Engine<'a> {
    pub fn new(spec: &'a MarketSpec, grids: &'a [ControlGrid], noise: &'a Noise, drift: DriftMode) -> Result<Self> {
        spec.validate()?;
        if grids.len() != spec.k() {
            return Err(Error::Config(format!("{} grids for {} agents", grids.len(), spec.k())));
        }
        if noise.d != spec.d() {
            return Err(Error::Dimension("noise dimension".into()));
        }
        Ok(Self {
            spec,
            grids,
            noise,
            n: noise.n,
            m: noise.m,
            dt: spec.horizon / noise.n as f64,
            drift,
        })
    }

    fn rates_and_mult(&self, policy: &Policy) -> Result<(Vec<f64>, Vec<f64>)> {
        let ctl = policy.to_controls(self.spec, self.grids);
        let (d, k) = (self.spec.d(), self.spec.k());
        let mut f = vec![0.0; ctl.rates.len()];
        for n in 0..self.n {
            for i in 0..d {
                for kk in 0..k {
                    let j = n * d * k + i * k + kk;
                    f[j] = self.spec.impact_multiplier(i, kk, ctl.rates[j])?;
                }
            }
        }
        Ok((ctl.rates, f))
    }

    fn reference(&self, rates: &[f64], fmul: &[f64]) -> Reference {
        let (d, k) = (self.spec.d(), self.spec.k());
        let w = d * k;
        let (n, m) = (self.n, self.m);
        let mut s = vec![0.0; (n + 1) * m * d];
        let mut b = vec![0.0; (n + 1) * m * k];
        let mut a = vec![0.0; (n + 1) * m * w];
        let init = self.spec.initial_state();
        let mut st = init.clone();
        let mut next = init.clone();
        for p in 0..m {
            st.clone_from(&init);
            for step in 0..=n {
                let o = step * m + p;
                s[o * d..(o + 1) * d].copy_from_slice(&st.s);
                b[o * k..(o + 1) * k].copy_from_slice(&st.b);
                a[o * w..(o + 1) * w].copy_from_slice(&st.alpha);
                if step < n {
                    self.spec.step_into(
                        &st,
                        &rates[step * w..(step + 1) * w],
                        &fmul[step * w..(step + 1) * w],
                        self.noise.at(step, p),
                        self.dt,
                        &mut next,
                    );
                    std::mem::swap(&mut st, &mut next);
                }
            }
        }
        Reference { m, d, k, s, b, a }
    }

    fn scratch(&self) -> Scratch {
        let init = self.spec.initial_state();
        Scratch {
            s_hist: vec![0.0; (self.n + 1) * self.spec.d()],
            lam_s: vec![0.0; self.spec.d()],
            lam_b: vec![0.0; self.spec.k()],
            st: init.clone(),
            next: init,
        }
    }

    /// Roll `start` forward to the horizon under `rates`, liquidate, and run
    /// the adjoint of agent `agent`'s relative terminal wealth. On return
    /// `sc.lam_s` holds the sensitivity to prices at `start`.
    #[allow(clippy::too_many_arguments)]
    fn rollout(
        &self,
        start_state: &State,
        start: usize,
        rates: &[f64],
        fmul: &[f64],
        path: usize,
        agent: usize,
        psi: f64,
        sc: &mut Scratch,
    ) -> Result<Continuation> {
        let spec = self.spec;
        let (d, k) = (spec.d(), spec.k());
        let w = d * k;
        sc.st.clone_from(start_state);
        for l in start..self.n {
            sc.s_hist[(l - start) * d..(l - start + 1) * d].copy_from_slice(&sc.st.s);
            spec.step_into(
                &sc.st,
                &rates[l * w..(l + 1) * w],
                &fmul[l * w..(l + 1) * w],
                self.noise.at(l, path),
                self.dt,
                &mut sc.next,
            );
            std::mem::swap(&mut sc.st, &mut sc.next);
        }
        let x = spec.terminal_liquidation(&sc.st, self.dt)?;
        let phi = spec.agents[agent].phi;
        let mean_x = x.iter().sum::<f64>() / k as f64;
        let x_hat = x[agent] - phi * mean_x;
        let gamma = spec.agents[agent].gamma;
        let u = bsde::terminal_utility(x_hat, gamma, psi);
        // linearize the utility at x = -psi, where its slope is one
        let slope = bsde::terminal_slope(-psi, gamma, psi);
        let dtl = self.dt * crate::market::LIQUIDATION_FRACTION;
        for q in 0..k {
            let wq = if q == agent { 1.0 } else { 0.0 } - phi / k as f64;
            sc.lam_b[q] = slope * wq * (1.0 + spec.r * dtl);
        }
        for i in 0..d {
            let mut g = 0.0;
            for q in 0..k {
                let wq = if q == agent { 1.0 } else { 0.0 } - phi / k as f64;
                let a = sc.st.alpha[i * k + q];
                if a != 0.0 {
                    g += wq * a * spec.impact_multiplier(i, q, -a / dtl)?;
                }
            }
            sc.lam_s[i] = slope * g;
        }
        let mut z_sum = 0.0;
        for l in (start..self.n).rev() {
            let dw = self.noise.at(l, path);
            let s_l = &sc.s_hist[(l - start) * d..(l - start + 1) * d];
            let v = &rates[l * w..(l + 1) * w];
            let f = &fmul[l * w..(l + 1) * w];
            for i in 0..d {
                let a = &spec.assets[i];
                z_sum += a.sigma * s_l[i] * sc.lam_s[i] * dw[i];
                let mut drift = a.mu - spec.r;
                let mut cash = 0.0;
                for q in 0..k {
                    drift += spec.agents[q].kappa_p[i] * v[i * k + q];
                    cash += sc.lam_b[q] * v[i * k + q] * f[i * k + q];
                }
                sc.lam_s[i] = sc.lam_s[i] * (1.0 + drift * self.dt + a.sigma * dw[i]) - cash * self.dt;
            }
            for q in 0..k {
                sc.lam_b[q] *= 1.0 + spec.r * self.dt;
            }
        }
        Ok(Continuation { carried: u - z_sum })
    }

    fn features(&self, state: &State, agent: usize, rates_k: &[f64], carried: f64, n: usize, path: usize, col: usize, c: usize, out: &mut [f64]) {
        let (d, k) = (self.spec.d(), self.spec.k());
        let mut j = 0;
        for i in 0..d {
            out[j] = state.s[i];
            j += 1;
        }
        out[j] = state.b[agent];
        j += 1;
        for i in 0..d {
            out[j] = state.alpha[i * k + agent];
            j += 1;
        }
        for &v in rates_k {
            out[j] = v;
            j += 1;
        }
        out[j] = carried;
        out[j + 1] = n as f64 / self.n as f64;
        out[j + 2] = if self.m > 1 { path as f64 / (self.m - 1) as f64 } else { 0.0 };
        out[j + 3] = if c > 1 { col as f64 / (c - 1) as f64 } else { 0.0 };
    }

    /// One backward sweep for `agent` over steps `n_from-1 .. 0` (all steps
    /// when `n_from == N`). `cur` holds the policy the other agents follow
    /// and receives the agent's new indices. Returns per-step records,
    /// latest step first.
    fn sweep(
        &self,
        agent: usize,
        cur: &mut Policy,
        psi: f64,
        approx: &mut Approx,
        n_from: usize,
        n_to: usize,
    ) -> Result<Vec<StepRecord>> {
        let spec = self.spec;
        let (d, k) = (spec.d(), spec.k());
        let w = d * k;
        let grid = &self.grids[agent];
        let c = grid.len();
        let m = self.m;
        let nf = feature_count(d);
        let s0: Vec<f64> = spec.assets.iter().map(|a| a.s0).collect();
        let sigma: Vec<f64> = spec.assets.iter().map(|a| a.sigma).collect();
        let reference = {
            let (rates, fmul) = self.rates_and_mult(cur)?;
            self.reference(&rates, &fmul)
        };
        let mut sc = self.scratch();
        let mut pre = spec.initial_state();
        let mut branched = spec.initial_state();
        let mut carried = vec![0.0; m * c];
        let mut target = vec![0.0; m * c];
        let mut raw = vec![0.0; m * c * nf];
        let members = match approx {
            Approx::Train { .. } => 1,
            Approx::Frozen(v) => v.len(),
        };
        let mut prev: Vec<Vec<Option<Array>>> = vec![vec![None; d]; members];
        let mut records = Vec::new();
        for n in (n_to..n_from).rev() {
            for i in 0..d {
                // branch every column of asset i at step n
                for col in 0..c {
                    // later clipped rates depend on the branch through the holdings
                    let mut trial = cur.clone();
                    trial.set(n, agent, i, col);
                    let (rates, fmul) = self.rates_and_mult(&trial)?;
                    let rates_k: Vec<f64> = (0..d).map(|ii| rates[n * w + ii * k + agent]).collect();
                    for p in 0..m {
                        reference.state(n, p, &mut pre);
                        spec.step_into(
                            &pre,
                            &rates[n * w..(n + 1) * w],
                            &fmul[n * w..(n + 1) * w],
                            self.noise.at(n, p),
                            self.dt,
                            &mut branched,
                        );
                        let cont = self.rollout(&branched, n + 1, &rates, &fmul, p, agent, psi, &mut sc)?;
                        let dw = self.noise.at(n, p);
                        let z = bsde::diffusion_term(&sc.lam_s, &sigma, &pre.s, dw);
                        let f = match self.drift {
                            DriftMode::Realized => 0.0,
                            DriftMode::Display => {
                                let value_fn = |st: &State| -> Result<f64> {
                                    let mut s2 = self.scratch();
                                    let cont = self.rollout(st, n + 1, &rates, &fmul, p, agent, psi, &mut s2)?;
                                    Ok(cont.carried)
                                };
                                let der = bsde::state_derivatives(value_fn, &branched, agent, &s0, BumpRule::default(), DerivativeSet::ALL)?;
                                bsde::bsde_drift(spec, &pre, &rates[n * w..(n + 1) * w], agent, &der)?
                            }
                        };
                        // U^n = U^{n+1} - f dt - Z per path; the network learns the drift part
                        let u = cont.carried - z;
                        carried[p * c + col] = u;
                        target[p * c + col] = f * self.dt;
                        let o = (p * c + col) * nf;
                        self.features(&pre, agent, &rates_k, u, n, p, col, c, &mut raw[o..o + nf]);
                    }
                }
                let raw_arr = Array::new(vec![m, c, nf], raw.clone())?;
                let (correction, loss) = self.correct(approx, &raw_arr, &target, &mut prev, i)?;
                let u_hat: Vec<f64> = carried.iter().zip(&correction).map(|(a, b)| a + b).collect();
                let slice = ValueSlice::select(m, c, u_hat, SelectionMode::Shared, psi)?;
                let chosen = slice.selected(0);
                cur.set(n, agent, i, chosen);
                records.push(StepRecord { slice, loss });
            }
        }
        Ok(records)
    }

    /// Evaluate `F` for all paths, and for training also accumulate the
    /// gradient of the step loss on the training rows.
    fn correct(
        &self,
        approx: &mut Approx,
        raw: &Array,
        target: &[f64],
        prev: &mut [Vec<Option<Array>>],
        asset: usize,
    ) -> Result<(Vec<f64>, f64)> {
        match approx {
            Approx::Frozen(nets) => {
                let mut outs = Vec::with_capacity(nets.len());
                for (e, net) in nets.iter().enumerate() {
                    let (corr, state) = net.infer(raw, prev[e][asset].as_ref(), 256)?;
                    prev[e][asset] = Some(state);
                    outs.push(corr);
                }
                let corr = ensemble_aggregate(&outs)?;
                let loss = bsde::loss(&corr.iter().zip(target).map(|(a, t)| t - a).collect::<Vec<_>>());
                Ok((corr, loss))
            }
            Approx::Train { net, grads, rows, calibrate } => {
                if *calibrate {
                    net.norm = calibrate_normalizer(raw, target);
                    *calibrate = false;
                }
                let (corr, state) = net.infer(raw, prev[0][asset].as_ref(), 256)?;
                let c = raw.shape()[1];
                let nf = raw.shape()[2];
                let loss = bsde::loss(&corr.iter().zip(target).map(|(a, t)| t - a).collect::<Vec<_>>());
                // gradient on the training rows
                let tp = rows.len();
                let mut sub = Vec::with_capacity(tp * c * nf);
                let mut sub_t = Vec::with_capacity(tp * c);
                for &r in rows.iter() {
                    sub.extend_from_slice(&raw.data()[r * c * nf..(r + 1) * c * nf]);
                    sub_t.extend_from_slice(&target[r * c..(r + 1) * c]);
                }
                let sub_prev = match &prev[0][asset] {
                    Some(p) => {
                        let l = p.shape()[1];
                        let cb = p.shape()[2];
                        let mut v = Vec::with_capacity(tp * l * cb);
                        for &r in rows.iter() {
                            v.extend_from_slice(&p.data()[r * l * cb..(r + 1) * l * cb]);
                        }
                        Some(Array::new(vec![tp, l, cb], v)?)
                    }
                    None => None,
                };
                let x = net.prepare_inputs(&Array::new(vec![tp, c, nf], sub)?)?;
                let mut tape = Tape::new();
                let vars = net.bind(&mut tape)?;
                let xv = tape.constant(x)?;
                let out = net.forward(&mut tape, &vars, xv, sub_prev.as_ref())?;
                let l = tape.mse(out.correction, &sub_t)?;
                let g = tape.backward(l)?;
                for (acc, (v, p)) in grads.iter_mut().zip(vars.iter().zip(&net.params)) {
                    let gi = g.wrt_or_zero(*v, p.shape())?;
                    acc.add_assign(&gi);
                }
                prev[0][asset] = Some(state);
                Ok((corr, loss))
            }
        }
    }
}

fn calibrate_normalizer(raw: &Array, target: &[f64]) -> Normalizer {
    let nf = raw.shape()[2];
    let rows = raw.len() / nf;
    let mut norm = Normalizer::identity(nf);
    // the last three features are already in [0, 1]
    for f in 0..nf - 3 {
        let mean = (0..rows).map(|r| raw.data()[r * nf + f]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (raw.data()[r * nf + f] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt();
        norm.shift[f] = mean;
        norm.scale[f] = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
    }
    let tm = target.iter().sum::<f64>() / target.len() as f64;
    let tsd = (target.iter().map(|t| (t - tm).powi(2)).sum::<f64>() / target.len() as f64).sqrt();
    // a target without spread (realized drift) gives a zero correction
    norm.out_scale = tsd;
    norm
}

/// One trained ensemble member.
#[derive(Debug, Clone)]
pub struct MemberResult {
    pub seed: u64,
    /// one checkpoint per agent
    pub checkpoints: Vec<Checkpoint>,
    pub policy: Policy,
    pub psi: Vec<f64>,
    /// per agent, per epoch summed step losses
    pub loss_history: Vec<Vec<f64>>,
    /// per agent `U_hat(0) - gamma/2 psi^2`
    pub value: Vec<f64>,
    pub epochs: usize,
    pub psi_iterations: usize,
    pub psi_converged: bool,
}

/// A training run: market, grids and solver settings.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub spec: MarketSpec,
    pub grids: Vec<ControlGrid>,
    pub config: SolverConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub members: Vec<MemberResult>,
}

impl TrainOutput {
    /// `checkpoints[e][k]`.
    pub fn checkpoints(&self) -> Vec<Vec<Checkpoint>> {
        self.members.iter().map(|m| m.checkpoints.clone()).collect()
    }
}

pub fn loss_digest(history: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in history {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl TrainRun {
    pub fn new(spec: MarketSpec, grids: Vec<ControlGrid>, config: SolverConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if grids.len() != spec.k() {
            return Err(Error::Config(format!("{} grids for {} agents", grids.len(), spec.k())));
        }
        Ok(Self { spec, grids, config })
    }

    /// Dual starting point per agent: the riskless terminal value of the
    /// starting relative wealth, negated.
    pub fn initial_psi(&self) -> Vec<f64> {
        let x0 = self.spec.relative_wealth(&self.spec.initial_wealth());
        let growth = (self.spec.r * self.spec.horizon).exp();
        x0.iter().map(|x| -x * growth).collect()
    }

    pub fn member_seed(&self, e: usize) -> u64 {
        derive_seed(self.config.seed, 1000 + e as u64)
    }

    pub fn train(&self) -> Result<TrainOutput> {
        let members = (0..self.config.ensemble)
            .map(|e| self.train_member(self.member_seed(e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainOutput { members })
    }

    pub fn train_member(&self, seed: u64) -> Result<MemberResult> {
        let cfg = &self.config;
        let spec = &self.spec;
        let (k, d) = (spec.k(), spec.d());
        let noise = Noise::generate(spec, cfg.steps, cfg.paths, derive_seed(seed, TAG_TRAIN_NOISE))?;
        let engine = Engine::new(spec, &self.grids, &noise, cfg.drift)?;
        let classes = agent_classes(spec, &self.grids);
        let reps: Vec<usize> = (0..k).filter(|&j| classes[j] == j).collect();
        let mut nets: Vec<Option<Network>> = vec![None; k];
        let mut adams: Vec<Option<Adam>> = vec![None; k];
        for &r in &reps {
            let mut nc = NetConfig::new(self.grids[r].len(), feature_count(d), derive_seed(seed, TAG_NET + 16 * r as u64));
            nc.heads = cfg.net.heads;
            nc.c_base = cfg.net.c_base;
            nc.levels = cfg.net.levels;
            nc.kernel = cfg.net.kernel;
            nc.groups = cfg.net.groups;
            nets[r] = Some(Network::new(nc)?);
            adams[r] = Some(Adam::new(cfg.learning_rate));
        }
        let mut calibrated = vec![false; k];
        let mut policy = Policy::liquidating(spec, &self.grids, cfg.steps);
        let mut psi = self.initial_psi();
        let mut loss_history = vec![Vec::new(); k];
        let mut value = vec![0.0; k];
        let mut epochs_total = 0;
        let mut psi_iterations = 0;
        let mut psi_converged = false;
        let tp = cfg.train_paths.min(cfg.paths);
        loop {
            let mut stable = 0;
            for epoch in 0..cfg.max_epochs {
                let mut next = policy.clone();
                let mut epoch_losses = vec![0.0; k];
                for &r in &reps {
                    let net = nets[r].as_mut().unwrap();
                    let mut grads: Vec<Array> = net.params.iter().map(|p| Array::zeros(p.shape())).collect();
                    let start = (epochs_total * tp) % cfg.paths;
                    let rows = (0..tp).map(|j| (start + j) % cfg.paths).collect();
                    let mut cur = policy.clone();
                    let mut approx = Approx::Train { net, grads: &mut grads, rows, calibrate: !calibrated[r] };
                    let records = engine.sweep(r, &mut cur, psi[r], &mut approx, cfg.steps, 0)?;
                    calibrated[r] = true;
                    let loss: f64 = records.iter().map(|s| s.loss).sum();
                    if !loss.is_finite() {
                        return Err(Error::Divergence(format!("agent {r}: loss is not finite")));
                    }
                    epoch_losses[r] = loss;
                    let last = records.last().unwrap();
                    let best = last.slice.column_means()[last.slice.selected(0)];
                    let gamma = spec.agents[r].gamma;
                    let net = nets[r].as_mut().unwrap();
                    adams[r].as_mut().unwrap().step(&mut net.params, &grads)?;
                    for j in 0..k {
                        if classes[j] == r {
                            for n in 0..cfg.steps {
                                for i in 0..d {
                                    next.set(n, j, i, cur.get(n, r, i));
                                }
                            }
                            epoch_losses[j] = loss;
                            value[j] = best - 0.5 * gamma * psi[r] * psi[r];
                        }
                    }
                }
                for j in 0..k {
                    loss_history[j].push(epoch_losses[j]);
                }
                epochs_total += 1;
                let changed = next != policy;
                policy = next;
                stable = if changed { 0 } else { stable + 1 };
                let converged_loss = epoch_losses.iter().all(|&l| l < cfg.loss_threshold);
                info!("epoch {epoch}: losses {epoch_losses:?}, policy changed: {changed}");
                if epoch + 1 >= cfg.min_epochs && (stable >= cfg.policy_patience || (converged_loss && stable >= 1)) {
                    break;
                }
                if epoch + 1 == cfg.max_epochs && changed {
                    warn!("stopped at max_epochs with the policy still moving");
                }
            }
            // dual update
            let term = crate::market::simulate_controls(spec, &policy.to_controls(spec, &self.grids), &noise)?;
            let next_psi: Vec<f64> = (0..k)
                .map(|j| -term.agent_x_hat(j).iter().sum::<f64>() / term.m as f64)
                .collect();
            let gap = next_psi.iter().zip(&psi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if gap < cfg.psi_tol {
                psi_converged = true;
                break;
            }
            if psi_iterations == cfg.psi_max_iter {
                warn!("psi iteration did not converge; last gap {gap:e}");
                break;
            }
            psi = next_psi;
            psi_iterations += 1;
        }
        let mut checkpoints = Vec::with_capacity(k);
        for j in 0..k {
            let r = classes[j];
            let hist = &loss_history[j];
            checkpoints.push(Checkpoint {
                network: nets[r].clone().unwrap(),
                meta: TrainingMeta {
                    seed,
                    agent: j,
                    epochs: hist.len(),
                    final_loss: *hist.last().unwrap_or(&0.0),
                    loss_digest: loss_digest(hist),
                    policy: policy.agent_rows(j),
                    psi: psi[j],
                },
            });
        }
        Ok(MemberResult {
            seed,
            checkpoints,
            policy,
            psi,
            loss_history,
            value,
            epochs: epochs_total,
            psi_iterations,
            psi_converged,
        })
    }
}

/// Result of ensemble inference.
#[derive(Debug, Clone)]
pub struct Inference {
    pub policy: Policy,
    pub controls: Controls,
    /// `alpha[(n*d + i)*K + k]` for `n = 0..=N`
    pub holdings: Vec<f64>,
    /// per agent `U_hat(0) - gamma/2 psi^2`
    pub value: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Ensemble inference on fresh paths: start from the members' per-step
/// median policy and run backward sweeps with the averaged networks.
pub fn infer(
    spec: &MarketSpec,
    grids: &[ControlGrid],
    checkpoints: &[Vec<Checkpoint>],
    config: &SolverConfig,
    seed: u64,
) -> Result<Inference> {
    let e = checkpoints.len();
    if e == 0 {
        return Err(Error::Config("no checkpoints".into()));
    }
    let (k, d, n) = (spec.k(), spec.d(), config.steps);
    if checkpoints.iter().any(|c| c.len() != k) {
        return Err(Error::Config("every member needs one checkpoint per agent".into()));
    }
    let noise = Noise::generate(spec, n, config.paths, seed)?;
    let engine = Engine::new(spec, grids, &noise, config.drift)?;
    let mut policy = Policy { n, k, d, idx: vec![0; n * k * d] };
    let mut psi = vec![0.0; k];
    for j in 0..k {
        psi[j] = checkpoints.iter().map(|c| c[j].meta.psi).sum::<f64>() / e as f64;
        for step in 0..n {
            for i in 0..d {
                let mut v: Vec<usize> = checkpoints
                    .iter()
                    .map(|c| c[j].meta.policy.get(step).and_then(|r| r.get(i)).copied().unwrap_or(0))
                    .collect();
                v.sort_unstable();
                policy.set(step, j, i, v[(v.len() - 1) / 2]);
            }
        }
    }
    let classes = agent_classes(spec, grids);
    let mut value = vec![0.0; k];
    for _ in 0..config.infer_sweeps.max(1) {
        let mut next = policy.clone();
        for r in (0..k).filter(|&j| classes[j] == j) {
            let nets: Vec<&Network> = checkpoints.iter().map(|c| &c[r].network).collect();
            let mut approx = Approx::Frozen(nets);
            let mut cur = policy.clone();
            let records = engine.sweep(r, &mut cur, psi[r], &mut approx, n, 0)?;
            let last = records.last().unwrap();
            let best = last.slice.column_means()[last.slice.selected(0)];
            for j in 0..k {
                if classes[j] == r {
                    for step in 0..n {
                        for i in 0..d {
                            next.set(step, j, i, cur.get(step, r, i));
                        }
                    }
                    value[j] = best - 0.5 * spec.agents[r].gamma * psi[r] * psi[r];
                }
            }
        }
        policy = next;
    }
    let controls = policy.to_controls(spec, grids);
    let holdings = controls.holdings(spec);
    Ok(Inference { policy, controls, holdings, value, psi })
}

/// Re-run one agent's backward sweep over steps `n_start..N` with frozen
/// networks, starting from `policy`; returns the agent's indices
/// `[step][asset]` for those steps.
pub fn resweep_tail(
    spec: &MarketSpec,
    grids: &[ControlGrid],
    checkpoints: &[Checkpoint],
    policy: &Policy,
    psi: f64,
    agent: usize,
    noise: &Noise,
    n_start: usize,
) -> Result<Vec<Vec<usize>>> {
    let engine = Engine::new(spec, grids, noise, DriftMode::Realized)?;
    let mut cur = policy.clone();
    let nets: Vec<&Network> = checkpoints.iter().map(|c| &c.network).collect();
    let mut approx = Approx::Frozen(nets);
    engine.sweep(agent, &mut cur, psi, &mut approx, policy.n, n_start)?;
    Ok((n_start..policy.n)
        .map(|n| (0..policy.d).map(|i| cur.get(n, agent, i)).collect())
        .collect())
}
