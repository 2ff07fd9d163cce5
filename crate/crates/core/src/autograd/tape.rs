use super::Array;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Concat(Vec<Var>),
    Narrow { x: Var, axis: usize, start: usize },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Swish(Var),
    Sum(Var),
    Mean(Var),
    Mse { x: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Single-owner record of primitive applications; gradients flow back in
/// exact reverse order of recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    is_param: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked parameter.
    pub fn wrt(&self, v: Var) -> Result<&Array> {
        if !self.is_param.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Contract(format!(
                "node {} is not a tracked parameter",
                v.0
            )));
        }
        self.grads[v.0]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("no gradient reached node {}", v.0)))
    }

    /// Like [`Gradients::wrt`] but returns zeros when the loss does not depend
    /// on the parameter.
    pub fn wrt_or_zero(&self, v: Var, shape: &[usize]) -> Result<Array> {
        match self.wrt(v) {
            Ok(g) => Ok(g.clone()),
            Err(_) if self.is_param.get(v.0).copied().unwrap_or(false) => Ok(Array::zeros(shape)),
            Err(e) => Err(e),
        }
    }
}

fn dims3(a: &Array, what: &str) -> Result<(usize, usize, usize)> {
    match a.shape() {
        [b, l, c] => Ok((*b, *l, *c)),
        s => Err(Error::Dimension(format!("{what} expects rank-3 input, got {s:?}"))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Tracked leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Param)
    }

    /// `x[..., in] · w[in, out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Dimension(format!("matmul {xs:?} x {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).len() / k;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = &xd[r * k..(r + 1) * k];
            let or = &mut out[r * n..(r + 1) * n];
            for (kk, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &wd[kk * n..(kk + 1) * n];
                for (o, &wv) in or.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        self.push(Array::new(shape, out)?, Op::MatMul { x, w })
    }

    /// Broadcast-add `b[c]` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = *xv.shape().last().unwrap();
        if bv.len() != c {
            return Err(Error::Dimension(format!(
                "bias of length {} for last axis {c}",
                bv.len()
            )));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Array::new(shape, out)?, Op::AddBias { x, b })
    }

    fn zip_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Scale(a, c))
    }

    /// 1-D convolution over axis 1 of `x[B, L, Cin]` with `w[Cout, Cin, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, len, cin) = dims3(self.value(x), "conv1d")?;
        let (cout, wcin, k) = dims3(self.value(w), "conv1d weight")?;
        if wcin != cin || self.value(b).len() != cout || stride == 0 {
            return Err(Error::Dimension(format!(
                "conv1d input channels {cin}, weight {:?}, bias {}",
                self.value(w).shape(),
                self.value(b).len()
            )));
        }
        if len + 2 * pad < k {
            return Err(Error::Dimension(format!("conv1d length {len} too short for kernel {k}")));
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; bsz * lout * cout];
        for bi in 0..bsz {
            for o in 0..lout {
                let orow = &mut out[(bi * lout + o) * cout..(bi * lout + o + 1) * cout];
                orow.copy_from_slice(bd);
                for kk in 0..k {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let xrow = &xd[(bi * len + pos as usize) * cin..(bi * len + pos as usize + 1) * cin];
                    for (co, ov) in orow.iter_mut().enumerate() {
                        let wbase = co * cin * k + kk;
                        let mut acc = 0.0;
                        for (ci, &xv) in xrow.iter().enumerate() {
                            acc += xv * wd[wbase + ci * k];
                        }
                        *ov += acc;
                    }
                }
            }
        }
        self.push(
            Array::new(vec![bsz, lout, cout], out)?,
            Op::Conv1d { x, w, b, stride, pad },
        )
    }

    /// Transposed 1-D convolution, `w[Cin, Cout, K]`; output length
    /// `(L-1)*stride - 2*pad + K + out_pad`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (bsz, len, cin) = dims3(self.value(x), "conv_transpose1d")?;
        let (wcin, cout, k) = dims3(self.value(w), "conv_transpose1d weight")?;
        if wcin != cin || self.value(b).len() != cout || stride == 0 || out_pad >= stride {
            return Err(Error::Dimension(format!(
                "conv_transpose1d input channels {cin}, weight {:?}",
                self.value(w).shape()
            )));
        }
        let full = (len - 1) * stride + k + out_pad;
        if full <= 2 * pad {
            return Err(Error::Dimension("conv_transpose1d output is empty".into()));
        }
        let lout = full - 2 * pad;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; bsz * lout * cout];
        for bi in 0..bsz {
            for o in 0..lout {
                out[(bi * lout + o) * cout..(bi * lout + o + 1) * cout].copy_from_slice(bd);
            }
            for i in 0..len {
                let xrow = &xd[(bi * len + i) * cin..(bi * len + i + 1) * cin];
                for kk in 0..k {
                    let pos = (i * stride + kk) as isize - pad as isize;
                    if pos < 0 || pos as usize >= lout {
                        continue;
                    }
                    let orow = &mut out[(bi * lout + pos as usize) * cout..(bi * lout + pos as usize + 1) * cout];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wbase = ci * cout * k + kk;
                        for (co, ov) in orow.iter_mut().enumerate() {
                            *ov += xv * wd[wbase + co * k];
                        }
                    }
                }
            }
        }
        self.push(
            Array::new(vec![bsz, lout, cout], out)?,
            Op::ConvTranspose1d { x, w, b, stride, pad },
        )
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).ndim() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension(format!("concat leading dims {lead:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Array::new(shape, out)?, Op::Concat(parts.to_vec()))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Dimension(format!("narrow axis {axis} [{start}, +{len}) of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Array::new(shape, out)?, Op::Narrow { x, axis, start })
    }

    /// Batched product `a[B,M,K] · b[B,K,N]`, or `a · bᵀ` with `b[B,N,K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = dims3(self.value(a), "bmm")?;
        let (bb, b1, b2) = dims3(self.value(b), "bmm")?;
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ba != bb || kb != k {
            return Err(Error::Dimension(format!(
                "bmm {:?} x {:?} (trans_b={trans_b})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; ba * m * n];
        for bi in 0..ba {
            let am = &ad[bi * m * k..(bi + 1) * m * k];
            let bm = &bd[bi * k * n..(bi + 1) * k * n];
            let om = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        let bv = if trans_b { bm[j * k + kk] } else { bm[kk * n + j] };
                        acc += am[i * k + kk] * bv;
                    }
                    om[i * n + j] = acc;
                }
            }
        }
        self.push(Array::new(vec![ba, m, n], out)?, Op::Bmm { a, b, trans_b })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Softmax(x))
    }

    /// Group normalization of `x[B, L, C]`: statistics over the spatial axis
    /// and the channels of each group, then per-channel affine `gamma, beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (bsz, len, c) = dims3(self.value(x), "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("{groups} groups do not divide {c} channels")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension("group_norm affine length".into()));
        }
        let cg = c / groups;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; bsz * groups];
        let count = (len * cg) as f64;
        for bi in 0..bsz {
            for g in 0..groups {
                let mut mean = 0.0;
                for l in 0..len {
                    for ch in g * cg..(g + 1) * cg {
                        mean += xd[(bi * len + l) * c + ch];
                    }
                }
                mean /= count;
                let mut var = 0.0;
                for l in 0..len {
                    for ch in g * cg..(g + 1) * cg {
                        let d = xd[(bi * len + l) * c + ch] - mean;
                        var += d * d;
                    }
                }
                var /= count;
                let r = 1.0 / (var + eps).sqrt();
                rstd[bi * groups + g] = r;
                for l in 0..len {
                    for ch in g * cg..(g + 1) * cg {
                        let i = (bi * len + l) * c + ch;
                        xhat[i] = (xd[i] - mean) * r;
                    }
                }
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gd[i % c] * h + bd[i % c])
            .collect();
        self.push(
            Array::new(vec![bsz, len, c], out)?,
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd },
        )
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Swish(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Array::scalar(s), Op::Mean(x))
    }

    /// Mean squared deviation of `x` from a fixed target of the same length.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != target.len() {
            return Err(Error::Dimension(format!(
                "mse over {} values with {} targets",
                v.len(),
                target.len()
            )));
        }
        let s = v
            .data()
            .iter()
            .zip(target)
            .map(|(a, t)| (a - t) * (a - t))
            .sum::<f64>()
            / target.len() as f64;
        self.push(Array::scalar(s), Op::Mse { x, target: target.to_vec() })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = vec![None; n];
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let is_param = self.nodes.iter().map(|nd| matches!(nd.op, Op::Param)).collect();
        Ok(Gradients { grads, is_param })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if matches!(self.nodes[v.0].op, Op::Constant) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Array, g: &Array, grads: &mut [Option<Array>]) {
        let gd = g.data();
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / k;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let (xd, wd) = (xv.data(), wv.data());
                for r in 0..rows {
                    let gr = &gd[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let wr = &wd[kk * n..(kk + 1) * n];
                        gx[r * k + kk] = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        let xv = xd[r * k + kk];
                        if xv != 0.0 {
                            for (gwv, &gv) in gw[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Array::new(xv.shape().to_vec(), gx).unwrap());
                self.accumulate(grads, *w, Array::new(wv.shape().to_vec(), gw).unwrap());
            }
            Op::AddBias { x, b } => {
                let c = self.value(*b).len();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, Array::new(self.value(*b).shape().to_vec(), gb).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, Array::new(g.shape().to_vec(), neg).unwrap());
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let ga: Vec<f64> = gd.iter().zip(bd).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = gd.iter().zip(ad).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga).unwrap());
                self.accumulate(grads, *b, Array::new(g.shape().to_vec(), gb).unwrap());
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga).unwrap());
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, len, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, _, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let lout = out.shape()[1];
                let (xd, wd) = (xv.data(), wv.data());
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                for bi in 0..bsz {
                    for o in 0..lout {
                        let grow = &gd[(bi * lout + o) * cout..(bi * lout + o + 1) * cout];
                        for (a, &v) in gb.iter_mut().zip(grow) {
                            *a += v;
                        }
                        for kk in 0..k {
                            let pos = (o * stride + kk) as isize - *pad as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let base = (bi * len + pos as usize) * cin;
                            for (co, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let wbase = co * cin * k + kk;
                                for ci in 0..cin {
                                    gx[base + ci] += gv * wd[wbase + ci * k];
                                    gw[wbase + ci * k] += gv * xd[base + ci];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Array::new(xv.shape().to_vec(), gx).unwrap());
                self.accumulate(grads, *w, Array::new(wv.shape().to_vec(), gw).unwrap());
                self.accumulate(grads, *b, Array::new(vec![cout], gb).unwrap());
            }
            Op::ConvTranspose1d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, len, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (_, cout, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let lout = out.shape()[1];
                let (xd, wd) = (xv.data(), wv.data());
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                for row in gd.chunks(cout) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                for bi in 0..bsz {
                    for i in 0..len {
                        let xbase = (bi * len + i) * cin;
                        for kk in 0..k {
                            let pos = (i * stride + kk) as isize - *pad as isize;
                            if pos < 0 || pos as usize >= lout {
                                continue;
                            }
                            let grow = &gd[(bi * lout + pos as usize) * cout..(bi * lout + pos as usize + 1) * cout];
                            for ci in 0..cin {
                                let wbase = ci * cout * k + kk;
                                let xval = xd[xbase + ci];
                                let mut acc = 0.0;
                                for (co, &gv) in grow.iter().enumerate() {
                                    acc += gv * wd[wbase + co * k];
                                    gw[wbase + co * k] += xval * gv;
                                }
                                gx[xbase + ci] += acc;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Array::new(xv.shape().to_vec(), gx).unwrap());
                self.accumulate(grads, *w, Array::new(wv.shape().to_vec(), gw).unwrap());
                self.accumulate(grads, *b, Array::new(vec![cout], gb).unwrap());
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.len() / total;
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = *pv.shape().last().unwrap();
                    let mut gp = vec![0.0; rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w].copy_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    self.accumulate(grads, p, Array::new(pv.shape().to_vec(), gp).unwrap());
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.value(*x).shape().to_vec();
                let len = out.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Array::new(s, gx).unwrap());
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..bsz {
                    let ao = bi * m * k;
                    let bo = bi * k * n;
                    let go = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            let gv = gd[go + i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                let bidx = if *trans_b { bo + j * k + kk } else { bo + kk * n + j };
                                ga[ao + i * k + kk] += gv * bd[bidx];
                                gb[bidx] += gv * ad[ao + i * k + kk];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Array::new(av.shape().to_vec(), ga).unwrap());
                self.accumulate(grads, *b, Array::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::Softmax(x) => {
                let c = *out.shape().last().unwrap();
                let mut gx = vec![0.0; out.len()];
                for ((yr, gr), gxr) in out.data().chunks(c).zip(gd.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &y), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Array::new(out.shape().to_vec(), gx).unwrap());
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let s = out.shape();
                let (bsz, len, c) = (s[0], s[1], s[2]);
                let cg = c / groups;
                let gam = self.value(*gamma).data();
                let mut ggam = vec![0.0; c];
                let mut gbet = vec![0.0; c];
                for (i, &gv) in gd.iter().enumerate() {
                    ggam[i % c] += gv * xhat[i];
                    gbet[i % c] += gv;
                }
                let mut gx = vec![0.0; out.len()];
                let count = (len * cg) as f64;
                for bi in 0..bsz {
                    for g in 0..*groups {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xh = 0.0;
                        for l in 0..len {
                            for ch in g * cg..(g + 1) * cg {
                                let i = (bi * len + l) * c + ch;
                                let dh = gd[i] * gam[ch];
                                mean_dh += dh;
                                mean_dh_xh += dh * xhat[i];
                            }
                        }
                        mean_dh /= count;
                        mean_dh_xh /= count;
                        let r = rstd[bi * groups + g];
                        for l in 0..len {
                            for ch in g * cg..(g + 1) * cg {
                                let i = (bi * len + l) * c + ch;
                                let dh = gd[i] * gam[ch];
                                gx[i] = r * (dh - mean_dh - xhat[i] * mean_dh_xh);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Array::new(s.to_vec(), gx).unwrap());
                self.accumulate(grads, *gamma, Array::new(vec![c], ggam).unwrap());
                self.accumulate(grads, *beta, Array::new(vec![c], gbet).unwrap());
            }
            Op::Swish(x) => {
                let xd = self.value(*x).data();
                let gx: Vec<f64> = xd
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Array::new(out.shape().to_vec(), gx).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Array::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                self.accumulate(grads, *x, Array::full(&shape, gd[0] / xv.len() as f64));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * gd[0] / target.len() as f64;
                let gx: Vec<f64> = xv.data().iter().zip(target).map(|(a, t)| scale * (a - t)).collect();
                self.accumulate(grads, *x, Array::new(xv.shape().to_vec(), gx).unwrap());
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param => "param",
        Op::MatMul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvTranspose1d { .. } => "conv_transpose1d",
        Op::Concat(..) => "concat",
        Op::Narrow { .. } => "narrow",
        Op::Bmm { .. } => "bmm",
        Op::Softmax(..) => "softmax",
        Op::GroupNorm { .. } => "group_norm",
        Op::Swish(..) => "swish",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Mse { .. } => "mse",
    }
}
