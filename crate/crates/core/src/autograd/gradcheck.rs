//! Central finite-difference verification of tape gradients.

use super::{Array, Tape, Var};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A scalar-valued graph over a list of parameters.
pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One named gradient check: a graph builder and the parameter values to probe.
pub struct Case {
    pub name: &'static str,
    pub params: Vec<Array>,
    pub build: Builder,
}

fn eval(build: &Builder, params: &[Array]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Largest entrywise relative error between tape gradients and central
/// differences with bump `1e-5 * max(1, |w|)`. Entries where both estimates
/// are below `1e-8` in magnitude are compared absolutely.
pub fn max_relative_error(case: &Case) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = case
        .params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = (case.build)(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (pi, p) in case.params.iter().enumerate() {
        let g = grads.wrt_or_zero(vars[pi], p.shape())?;
        for j in 0..p.len() {
            let w = p.data()[j];
            let h = 1e-5 * w.abs().max(1.0);
            let mut plus = case.params.clone();
            plus[pi].data_mut()[j] = w + h;
            let mut minus = case.params.clone();
            minus[pi].data_mut()[j] = w - h;
            let fd = (eval(&case.build, &plus)? - eval(&case.build, &minus)?) / (2.0 * h);
            let ad = g.data()[j];
            let scale = fd.abs().max(ad.abs());
            let err = if scale < 1e-8 { (fd - ad).abs() } else { (fd - ad).abs() / scale };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Contract with a fixed random weighting so every output entry gets a
/// distinct cotangent.
fn weigh(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_array(&mut rng, &shape, 1.0))?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Every primitive in isolation plus a three-layer composite that uses all
/// of them.
pub fn standard_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| rand_array(&mut rng, shape, 1.0);
    let mut cases = Vec::new();

    cases.push(Case {
        name: "matmul",
        params: vec![r(&[2, 3, 4]), r(&[4, 5])],
        build: Box::new(|t, p| {
            let y = t.matmul(p[0], p[1])?;
            weigh(t, y, 1)
        }),
    });
    cases.push(Case {
        name: "add_bias",
        params: vec![r(&[3, 4]), r(&[4])],
        build: Box::new(|t, p| {
            let y = t.add_bias(p[0], p[1])?;
            weigh(t, y, 2)
        }),
    });
    cases.push(Case {
        name: "add_sub_mul_scale",
        params: vec![r(&[2, 3]), r(&[2, 3])],
        build: Box::new(|t, p| {
            let a = t.add(p[0], p[1])?;
            let s = t.sub(p[0], p[1])?;
            let m = t.mul(a, s)?;
            let y = t.scale(m, -1.7)?;
            weigh(t, y, 3)
        }),
    });
    cases.push(Case {
        name: "conv1d",
        params: vec![r(&[2, 9, 3]), r(&[4, 3, 3]), r(&[4])],
        build: Box::new(|t, p| {
            let y = t.conv1d(p[0], p[1], p[2], 2, 1)?;
            weigh(t, y, 4)
        }),
    });
    cases.push(Case {
        name: "conv_transpose1d",
        params: vec![r(&[2, 4, 3]), r(&[3, 2, 3]), r(&[2])],
        build: Box::new(|t, p| {
            let y = t.conv_transpose1d(p[0], p[1], p[2], 2, 1, 1)?;
            weigh(t, y, 5)
        }),
    });
    cases.push(Case {
        name: "concat_narrow",
        params: vec![r(&[2, 3, 2]), r(&[2, 3, 3])],
        build: Box::new(|t, p| {
            let c = t.concat(&[p[0], p[1]])?;
            let n = t.narrow(c, 2, 1, 3)?;
            let m = t.narrow(n, 1, 1, 2)?;
            weigh(t, m, 6)
        }),
    });
    cases.push(Case {
        name: "bmm",
        params: vec![r(&[2, 3, 4]), r(&[2, 4, 2]), r(&[2, 5, 4])],
        build: Box::new(|t, p| {
            let a = t.bmm(p[0], p[1], false)?;
            let b = t.bmm(p[0], p[2], true)?;
            let la = weigh(t, a, 7)?;
            let lb = weigh(t, b, 8)?;
            t.add(la, lb)
        }),
    });
    cases.push(Case {
        name: "softmax",
        params: vec![r(&[3, 5])],
        build: Box::new(|t, p| {
            let y = t.softmax(p[0])?;
            weigh(t, y, 9)
        }),
    });
    cases.push(Case {
        name: "group_norm",
        params: vec![r(&[2, 4, 6]), r(&[6]), r(&[6])],
        build: Box::new(|t, p| {
            let y = t.group_norm(p[0], p[1], p[2], 3, 1e-5)?;
            weigh(t, y, 10)
        }),
    });
    cases.push(Case {
        name: "swish",
        params: vec![r(&[4, 3])],
        build: Box::new(|t, p| {
            let y = t.swish(p[0])?;
            weigh(t, y, 11)
        }),
    });
    cases.push(Case {
        name: "mean",
        params: vec![r(&[3, 3])],
        build: Box::new(|t, p| {
            let sq = t.mul(p[0], p[0])?;
            t.mean(sq)
        }),
    });
    cases.push(Case {
        name: "mse",
        params: vec![r(&[2, 4])],
        build: Box::new(|t, p| t.mse(p[0], &[0.3, -0.1, 0.7, 0.0, 1.0, -1.0, 0.5, 0.25])),
    });
    cases.push(Case {
        name: "composite",
        params: vec![
            r(&[2, 8, 3]),
            r(&[3, 4]),
            r(&[4]),
            r(&[4, 4, 3]),
            r(&[4]),
            r(&[4]),
            r(&[4]),
            r(&[4, 4, 3]),
            r(&[4]),
            r(&[8, 1]),
        ],
        build: Box::new(|t, p| {
            // attention-style mixing
            let h = t.matmul(p[0], p[1])?;
            let h = t.add_bias(h, p[2])?;
            let s = t.bmm(h, h, true)?;
            let s = t.scale(s, 0.5)?;
            let a = t.softmax(s)?;
            let h = t.bmm(a, h, false)?;
            // down, normalize, activate, up, skip
            let d = t.conv1d(h, p[3], p[4], 2, 1)?;
            let d = t.group_norm(d, p[5], p[6], 2, 1e-5)?;
            let d = t.swish(d)?;
            let u = t.conv_transpose1d(d, p[7], p[8], 2, 1, 1)?;
            let c = t.concat(&[u, h])?;
            let c = t.sub(c, c)?;
            let c2 = t.concat(&[u, h])?;
            let c = t.add(c, c2)?;
            let o = t.matmul(c, p[9])?;
            let head = t.narrow(o, 1, 2, 5)?;
            t.mse(head, &[0.1, -0.2, 0.3, 0.0, 0.05, 0.2, -0.4, 0.1, 0.0, 0.3])
        }),
    });
    cases
}
