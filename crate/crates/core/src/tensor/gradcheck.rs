//! Central finite-difference checks of every tape primitive.

use crate::rng::Rng;
use crate::tensor::graph::AttentionMask;
use crate::tensor::{Graph, ParameterGroup, Tensor, Var};
use crate::Result;

pub const EPS: f32 = 1e-2;
pub const TOL: f64 = 1e-3;

type LossFn<'a> = dyn Fn(&mut Graph, &ParameterGroup) -> Result<Var> + 'a;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, 0 when both vanish.
pub fn rel_err(a: &[f32], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|y| y * y).sum::<f64>().sqrt();
    let m = na.max(nn);
    if m < 1e-7 {
        0.0
    } else {
        diff / m
    }
}

fn loss_at(f: &LossFn, p: &ParameterGroup) -> Result<f64> {
    let mut g = Graph::new();
    let l = f(&mut g, p)?;
    Ok(g.scalar(l) as f64)
}

/// Largest relative error over every parameter of `p`.
pub fn check(p: &ParameterGroup, f: &LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let l = f(&mut g, p)?;
    let grads = g.backward(l)?;
    let mut worst = 0.0f64;
    for (name, t) in p.iter() {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = Vec::with_capacity(t.numel());
        for i in 0..t.numel() {
            let at = |delta: f32| -> Result<f64> {
                let mut data = t.data().to_vec();
                data[i] += delta;
                let mut q = p.clone();
                q.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
                loss_at(f, &q)
            };
            // Richardson step cancels the O(h^2) truncation term.
            let d = |h: f32| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h as f64)) };
            numeric.push((4.0 * d(EPS / 2.0)? - d(EPS)?) / 3.0);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Random values bounded away from zero so relu kinks stay out of reach.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x = rng.normal() as f32;
            x.signum() * (0.1 + x.abs())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar through fixed random weights.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let w = Rng::new(seed).normal_vec(n, 1.0);
    let z = g.mul_const(y, w)?;
    g.sum(z)
}

fn group(entries: Vec<(&str, Tensor)>) -> ParameterGroup {
    let mut p = ParameterGroup::new();
    for (n, t) in entries {
        p.insert(n, t);
    }
    p
}

/// Every primitive op, each reduced to a scalar. Returns `(name, error)`.
pub fn primitives() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(7);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &'static str, p: ParameterGroup, f: &LossFn| -> Result<()> {
        out.push((name, check(&p, f)?));
        Ok(())
    };

    run("matmul", group(vec![("a", rand(&[3, 4], r)), ("b", rand(&[4, 2], r))]), &|g, p| {
        let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
        let y = g.matmul(a, b)?;
        readout(g, y, 1)
    })?;
    run("matmul_t", group(vec![("a", rand(&[3, 4], r)), ("b", rand(&[5, 4], r))]), &|g, p| {
        let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
        let y = g.matmul_t(a, b)?;
        readout(g, y, 2)
    })?;
    run("add", group(vec![("a", rand(&[3, 4], r)), ("b", rand(&[3, 4], r))]), &|g, p| {
        let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
        let y = g.add(a, b)?;
        readout(g, y, 3)
    })?;
    run("add_bias", group(vec![("a", rand(&[3, 4], r)), ("b", rand(&[4], r))]), &|g, p| {
        let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
        let y = g.add_bias(a, b)?;
        readout(g, y, 4)
    })?;
    run("mul", group(vec![("a", rand(&[3, 4], r)), ("b", rand(&[3, 4], r))]), &|g, p| {
        let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
        let y = g.mul(a, b)?;
        readout(g, y, 5)
    })?;
    run("scale", group(vec![("a", rand(&[3, 4], r))]), &|g, p| {
        let a = g.bind(p, "a")?;
        let y = g.scale(a, -1.7)?;
        readout(g, y, 6)
    })?;
    run("relu", group(vec![("a", away_from_zero(&[4, 4], r))]), &|g, p| {
        let a = g.bind(p, "a")?;
        let y = g.relu(a)?;
        readout(g, y, 7)
    })?;
    run("softmax_rows", group(vec![("a", rand(&[3, 5], r))]), &|g, p| {
        let a = g.bind(p, "a")?;
        let y = g.softmax_rows(a)?;
        readout(g, y, 8)
    })?;
    run(
        "layer_norm",
        group(vec![("x", rand(&[3, 4], r)), ("gamma", rand(&[4], r)), ("beta", rand(&[4], r))]),
        &|g, p| {
            let (x, ga, be) = (g.bind(p, "x")?, g.bind(p, "gamma")?, g.bind(p, "beta")?);
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            readout(g, y, 9)
        },
    )?;
    run("embedding", group(vec![("table", rand(&[5, 3], r))]), &|g, p| {
        let t = g.bind(p, "table")?;
        let y = g.embedding(t, &[0, 2, 2, 4, 1])?;
        readout(g, y, 10)
    })?;
    run("gather_rows", group(vec![("x", rand(&[4, 3], r))]), &|g, p| {
        let x = g.bind(p, "x")?;
        let y = g.gather_rows(x, &[3, 1, 3])?;
        readout(g, y, 11)
    })?;
    run("mask_rows", group(vec![("x", rand(&[4, 3], r))]), &|g, p| {
        let x = g.bind(p, "x")?;
        let y = g.mask_rows(x, &[true, false, true, false])?;
        readout(g, y, 12)
    })?;
    run("override_rows", group(vec![("base", rand(&[5, 3], r)), ("vals", rand(&[2, 3], r))]), &|g, p| {
        let (b, v) = (g.bind(p, "base")?, g.bind(p, "vals")?);
        let y = g.override_rows(b, v, &[1, 4])?;
        readout(g, y, 13)
    })?;
    run("add_tail", group(vec![("e", rand(&[12, 4], r)), ("p", rand(&[6, 4], r))]), &|g, p| {
        let (e, q) = (g.bind(p, "e")?, g.bind(p, "p")?);
        let y = g.add_tail(e, q, 6, 3)?;
        readout(g, y, 14)
    })?;
    run("add_tail_vec", group(vec![("e", rand(&[12, 4], r)), ("v", rand(&[4], r))]), &|g, p| {
        let (e, v) = (g.bind(p, "e")?, g.bind(p, "v")?);
        let y = g.add_tail_vec(e, v, 0.3, 6, 3)?;
        readout(g, y, 15)
    })?;
    run("concat_cols", group(vec![("a", rand(&[3, 2], r)), ("b", rand(&[3, 3], r))]), &|g, p| {
        let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
        let y = g.concat_cols(&[a, b, a])?;
        readout(g, y, 16)
    })?;
    run("row_dot", group(vec![("a", rand(&[3, 4], r)), ("b", rand(&[3, 4], r))]), &|g, p| {
        let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
        let y = g.row_dot(a, b)?;
        readout(g, y, 17)
    })?;
    let qkv = |r: &mut Rng| group(vec![("q", rand(&[8, 2], r)), ("k", rand(&[8, 2], r)), ("v", rand(&[8, 2], r))]);
    run("attention", qkv(r), &|g, p| {
        let (q, k, v) = (g.bind(p, "q")?, g.bind(p, "k")?, g.bind(p, "v")?);
        let y = g.attention(q, k, v, 4, &AttentionMask::default())?;
        readout(g, y, 18)
    })?;
    run("attention_masked", qkv(r), &|g, p| {
        let (q, k, v) = (g.bind(p, "q")?, g.bind(p, "k")?, g.bind(p, "v")?);
        let mask =
            AttentionMask { causal: true, key_valid: Some(vec![false, true, true, true, false, false, true, true]) };
        let y = g.attention(q, k, v, 4, &mask)?;
        readout(g, y, 19)
    })?;
    run("bce_with_logits", group(vec![("x", rand(&[6], r))]), &|g, p| {
        let x = g.bind(p, "x")?;
        g.bce_with_logits(x, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    })?;
    run("cross_entropy", group(vec![("x", rand(&[3, 4], r))]), &|g, p| {
        let x = g.bind(p, "x")?;
        g.cross_entropy(x, &[0, 3, 1])
    })?;
    run("sum", group(vec![("x", rand(&[3, 4], r))]), &|g, p| {
        let x = g.bind(p, "x")?;
        let y = g.mul(x, x)?;
        g.sum(y)
    })?;
    run("mean", group(vec![("x", rand(&[3, 4], r))]), &|g, p| {
        let x = g.bind(p, "x")?;
        let y = g.mul(x, x)?;
        g.mean(y)
    })?;
    Ok(out)
}
