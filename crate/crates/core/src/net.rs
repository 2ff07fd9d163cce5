//! Residual U-net with multi-head self-attention over the control axis.
//!
//! One sample is the sequence of control columns for one path at one step;
//! features are channels. The layout is channels-last, `[B, L, channels]`.

use crate::autograd::{Array, Tape, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
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
    /// number of control columns before padding
    pub columns: usize,
    pub features: usize,
    #[serde(default)]
    pub seed: u64,
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

impl NetConfig {
    pub fn new(columns: usize, features: usize, seed: u64) -> Self {
        Self {
            heads: d_heads(),
            c_base: d_c_base(),
            levels: d_levels(),
            kernel: d_kernel(),
            groups: d_groups(),
            columns,
            features,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.c_base == 0 || self.levels == 0 || self.columns == 0 || self.features == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel width {} must be odd", self.kernel)));
        }
        if self.groups == 0 || self.c_base % self.groups != 0 {
            return Err(Error::Config(format!(
                "{} groups do not divide {} channels",
                self.groups, self.c_base
            )));
        }
        if self.c_base % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide {} channels",
                self.heads, self.c_base
            )));
        }
        Ok(())
    }

    /// Spatial length after padding the control axis to a multiple of
    /// `2^levels`.
    pub fn padded_len(&self) -> usize {
        let unit = 1usize << self.levels;
        self.columns.div_ceil(unit) * unit
    }

    /// Parameter count implied by the architecture.
    pub fn param_count(&self) -> usize {
        let (f, c, k) = (self.features, self.c_base, self.kernel);
        let attention = 3 * f * c + f * c + c + 2 * c;
        let down = self.levels * (c * c * k + c + 2 * c);
        let up = (c * c * k + c + 2 * c) + (self.levels - 1) * (2 * c * c * k + c + 2 * c);
        let tail = c * c + c + 1;
        attention + down + up + tail
    }
}

/// Per-feature affine standardization of network inputs, plus the scale of
/// the learned correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub out_scale: f64,
}

impl Normalizer {
    pub fn identity(features: usize) -> Self {
        Self {
            shift: vec![0.0; features],
            scale: vec![1.0; features],
            out_scale: 1.0,
        }
    }
}

/// Trainable network state.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub names: Vec<String>,
    pub params: Vec<Array>,
    pub norm: Normalizer,
}

/// Output of one forward pass.
pub struct Forward {
    /// learned correction `[B, columns, 1]`
    pub correction: Var,
    /// residual state passed to the next (earlier) step, `[B, L, c_base]`
    pub state: Var,
}

struct Params<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Params<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (f, c, k) = (config.features, config.c_base, config.kernel);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut uniform = |name: String, shape: &[usize], fan_in: usize, names: &mut Vec<String>, params: &mut Vec<Array>| {
            let a = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            names.push(name);
            params.push(Array::new(shape.to_vec(), data).unwrap());
        };
        let constant = |name: String, shape: &[usize], v: f64, names: &mut Vec<String>, params: &mut Vec<Array>| {
            names.push(name);
            params.push(Array::full(shape, v));
        };
        uniform("attn.wq".into(), &[f, c], f, &mut names, &mut params);
        uniform("attn.wk".into(), &[f, c], f, &mut names, &mut params);
        uniform("attn.wv".into(), &[f, c], f, &mut names, &mut params);
        uniform("attn.wa".into(), &[f, c], f, &mut names, &mut params);
        uniform("attn.ba".into(), &[c], f, &mut names, &mut params);
        constant("attn.norm.scale".into(), &[c], 1.0, &mut names, &mut params);
        constant("attn.norm.shift".into(), &[c], 0.0, &mut names, &mut params);
        for l in 0..config.levels {
            uniform(format!("down{l}.w"), &[c, c, k], c * k, &mut names, &mut params);
            uniform(format!("down{l}.b"), &[c], c * k, &mut names, &mut params);
            constant(format!("down{l}.norm.scale"), &[c], 1.0, &mut names, &mut params);
            constant(format!("down{l}.norm.shift"), &[c], 0.0, &mut names, &mut params);
        }
        for l in (0..config.levels).rev() {
            let cin = if l == config.levels - 1 { c } else { 2 * c };
            uniform(format!("up{l}.w"), &[cin, c, k], cin * k, &mut names, &mut params);
            uniform(format!("up{l}.b"), &[c], cin * k, &mut names, &mut params);
            constant(format!("up{l}.norm.scale"), &[c], 1.0, &mut names, &mut params);
            constant(format!("up{l}.norm.shift"), &[c], 0.0, &mut names, &mut params);
        }
        uniform("time.wr".into(), &[c, c], c, &mut names, &mut params);
        constant("head.w".into(), &[c, 1], 0.0, &mut names, &mut params);
        constant("head.b".into(), &[1], 0.0, &mut names, &mut params);
        let features = config.features;
        Ok(Self {
            config,
            names,
            params,
            norm: Normalizer::identity(features),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Register all parameters on `tape` as tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Standardize raw features `[B, columns, F]` and pad to `[B, L, F]`.
    pub fn prepare_inputs(&self, raw: &Array) -> Result<Array> {
        let s = raw.shape();
        if s.len() != 3 || s[1] != self.config.columns || s[2] != self.config.features {
            return Err(Error::Dimension(format!(
                "inputs {s:?}, expected [B, {}, {}]",
                self.config.columns, self.config.features
            )));
        }
        let (b, c, f) = (s[0], s[1], s[2]);
        let l = self.config.padded_len();
        let mut out = vec![0.0; b * l * f];
        for bi in 0..b {
            for ci in 0..c {
                for fi in 0..f {
                    let x = raw.data()[(bi * c + ci) * f + fi];
                    out[(bi * l + ci) * f + fi] = (x - self.norm.shift[fi]) / self.norm.scale[fi];
                }
            }
        }
        Array::new(vec![b, l, f], out)
    }

    /// Attention block: `G(M_H + W_a X)`.
    pub fn attention(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut p = Params { vars, at: 0 };
        self.attention_with(tape, &mut p, x)
    }

    fn attention_with(&self, tape: &mut Tape, p: &mut Params, x: Var) -> Result<Var> {
        let (wq, wk, wv, wa, ba, gs, gb) = (p.next(), p.next(), p.next(), p.next(), p.next(), p.next(), p.next());
        let l = tape.value(x).shape()[1];
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let dh = self.config.c_base / self.config.heads;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.narrow(q, 2, h * dh, dh)?;
            let kh = tape.narrow(k, 2, h * dh, dh)?;
            let vh = tape.narrow(v, 2, h * dh, dh)?;
            let s = tape.bmm(qh, kh, true)?;
            let s = tape.scale(s, 1.0 / (l as f64).sqrt())?;
            let a = tape.softmax(s)?;
            heads.push(tape.bmm(a, vh, false)?);
        }
        let mh = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
        let mix = tape.matmul(x, wa)?;
        let mix = tape.add_bias(mix, ba)?;
        let sum = tape.add(mh, mix)?;
        tape.group_norm(sum, gs, gb, self.config.groups, GROUP_NORM_EPS)
    }

    fn unet_with(&self, tape: &mut Tape, p: &mut Params, xa: Var) -> Result<Var> {
        let pad = (self.config.kernel - 1) / 2;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = xa;
        for _ in 0..self.config.levels {
            let (w, b, gs, gb) = (p.next(), p.next(), p.next(), p.next());
            h = tape.conv1d(h, w, b, 2, pad)?;
            h = tape.group_norm(h, gs, gb, self.config.groups, GROUP_NORM_EPS)?;
            h = tape.swish(h)?;
            skips.push(h);
        }
        for l in (0..self.config.levels).rev() {
            let (w, b, gs, gb) = (p.next(), p.next(), p.next(), p.next());
            if l != self.config.levels - 1 {
                h = tape.concat(&[h, skips[l]])?;
            }
            h = tape.conv_transpose1d(h, w, b, 2, pad, 1)?;
            h = tape.group_norm(h, gs, gb, self.config.groups, GROUP_NORM_EPS)?;
            h = tape.swish(h)?;
        }
        tape.add(h, xa)
    }

    /// Full forward: attention, U-net, residual carry-over through time and
    /// the scalar head. `prev` is the state returned at the following step
    /// (zeros at the last step); it is treated as a constant.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: Var, prev: Option<&Array>) -> Result<Forward> {
        let mut p = Params { vars, at: 0 };
        let xa = self.attention_with(tape, &mut p, inputs)?;
        let u = self.unet_with(tape, &mut p, xa)?;
        let wr = p.next();
        let state = match prev {
            Some(prev) => {
                if prev.shape() != tape.value(u).shape() {
                    return Err(Error::Dimension(format!(
                        "carried state {:?} vs {:?}",
                        prev.shape(),
                        tape.value(u).shape()
                    )));
                }
                let pv = tape.constant(prev.clone())?;
                let carried = tape.matmul(pv, wr)?;
                tape.add(u, carried)?
            }
            None => u,
        };
        let (hw, hb) = (p.next(), p.next());
        let out = tape.matmul(state, hw)?;
        let out = tape.add_bias(out, hb)?;
        let cols = tape.narrow(out, 1, 0, self.config.columns)?;
        let cols = tape.scale(cols, self.norm.out_scale)?;
        Ok(Forward { correction: cols, state })
    }

    /// Forward pass without gradients, in chunks of at most `chunk` samples.
    /// Returns the correction `[B*columns]` and the carried state.
    pub fn infer(&self, raw: &Array, prev: Option<&Array>, chunk: usize) -> Result<(Vec<f64>, Array)> {
        let x = self.prepare_inputs(raw)?;
        let (b, l, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c = self.config.columns;
        let cb = self.config.c_base;
        let chunk = chunk.max(1);
        let mut corr = Vec::with_capacity(b * c);
        let mut state = Vec::with_capacity(b * l * cb);
        let mut start = 0;
        while start < b {
            let n = chunk.min(b - start);
            let xs = Array::new(vec![n, l, f], x.data()[start * l * f..(start + n) * l * f].to_vec())?;
            let ps = match prev {
                Some(p) => Some(Array::new(vec![n, l, cb], p.data()[start * l * cb..(start + n) * l * cb].to_vec())?),
                None => None,
            };
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape)?;
            let xv = tape.constant(xs)?;
            let out = self.forward(&mut tape, &vars, xv, ps.as_ref())?;
            corr.extend_from_slice(tape.value(out.correction).data());
            state.extend_from_slice(tape.value(out.state).data());
            start += n;
        }
        Ok((corr, Array::new(vec![b, l, cb], state)?))
    }

    /// `U_hat = carried + F`.
    pub fn approximate_value(&self, raw: &Array, carried: &[f64], prev: Option<&Array>) -> Result<(Vec<f64>, Array)> {
        let (corr, state) = self.infer(raw, prev, 256)?;
        if corr.len() != carried.len() {
            return Err(Error::Dimension("carried values do not match network output".into()));
        }
        let u = carried.iter().zip(&corr).map(|(a, b)| a + b).collect::<Vec<_>>();
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite value estimate".into()));
        }
        Ok((u, state))
    }
}

/// Training metadata stored with a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub agent: usize,
    pub epochs: usize,
    pub final_loss: f64,
    /// hex SHA-256 of the per-epoch loss trajectory
    pub loss_digest: String,
    /// selected control index per `[step][asset]` after training
    pub policy: Vec<Vec<usize>>,
    pub psi: f64,
}

/// A trained network with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: NetConfig,
    normalizer: Normalizer,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

const MAGIC: &[u8; 8] = b"MVXCKPT1";

impl Checkpoint {
    /// Layout: 8-byte magic, little-endian u64 header length, JSON header,
    /// then every tensor's values as little-endian f64 in header order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: "mvexec-checkpoint-1".into(),
            config: self.network.config.clone(),
            normalizer: self.network.norm.clone(),
            meta: self.meta.clone(),
            tensors: self
                .network
                .names
                .iter()
                .zip(&self.network.params)
                .map(|(n, p)| TensorEntry { name: n.clone(), shape: p.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in &self.network.params {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Schema("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut network = Network::new(header.config)?;
        if header.tensors.len() != network.params.len() {
            return Err(Error::Schema("tensor count does not match the configuration".into()));
        }
        for (i, t) in header.tensors.iter().enumerate() {
            if t.name != network.names[i] || t.shape != network.params[i].shape() {
                return Err(Error::Schema(format!("unexpected tensor {} {:?}", t.name, t.shape)));
            }
            let mut buf = [0u8; 8];
            for v in network.params[i].data_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        network.norm = header.normalizer;
        Ok(Self { network, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
