//! Composed-loss check against an independent double-precision forward.

pub use pcl_core::tensor::gradcheck::{rel_err, TOL};

use pcl_core::backbone::{Backbone, BackboneConfig, SeqBatch};
use pcl_core::prompt::ContextualAttention;
use pcl_core::rng::Rng;
use pcl_core::tensor::{Graph, ParameterGroup, Tensor, Var};
use pcl_core::Result;

pub fn primitives() -> Vec<(&'static str, f64)> {
    pcl_core::tensor::gradcheck::primitives().unwrap()
}
const D: usize = 4;
const N: usize = 6;
const HEADS: usize = 2;
const T: usize = 3;
const LAMBDA: f64 = 0.5;
const CLASSES: usize = 3;
const LABELS: [usize; 2] = [2, 0];
const LINK_ITEMS: [usize; 2] = [5, 1];
const LINK_TARGETS: [f32; 2] = [1.0, 0.0];

/// Parameters and inputs of the composed check.
pub struct Composed {
    pub params: ParameterGroup,
    pub backbone_names: Vec<String>,
    pub et: Tensor,
    pub batch: SeqBatch,
}

pub fn composed_setup() -> Composed {
    let cfg = BackboneConfig { d: D, n: N, blocks: 1, heads: HEADS, dropout: 0.0 };
    let mut rng = Rng::new(11);
    let bb = Backbone::new(cfg, 7, &mut rng).unwrap();
    let attn = ContextualAttention::new("ctx", D, HEADS, &mut rng).unwrap();
    let mut params = ParameterGroup::new();
    for (name, t) in bb.params().iter() {
        // Move the layer-norm weights off their unit/zero initial values.
        let data = t.data().iter().map(|x| x + 0.1 * rng.normal() as f32).collect();
        params.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    params.extend(attn.params().clone());
    params.insert("prompt", Tensor::randn(&[N, D], 0.3, &mut rng));
    params.insert("adapter.w", Tensor::randn(&[D, CLASSES], 0.5, &mut rng));
    params.insert("adapter.b", Tensor::randn(&[CLASSES], 0.5, &mut rng));
    Composed {
        params,
        backbone_names: bb.params().names().cloned().collect(),
        et: Tensor::randn(&[3, D], 1.0, &mut rng),
        batch: SeqBatch::from_sequences(&[vec![1usize, 2, 3, 4, 5, 6], vec![3, 7, 2]], N),
    }
}

/// The prompted forward on the tape: position prompt, contextual prompt,
/// one transformer block, then a classification and a link loss.
pub fn composed_loss(c: &Composed, g: &mut Graph, p: &ParameterGroup) -> Result<Var> {
    let tensors = p.iter().filter(|(n, _)| c.backbone_names.contains(n)).map(|(n, t)| (n.clone(), t.clone())).collect();
    let bb = Backbone::from_tensors(tensors, 0.0)?;
    let mut ap = ParameterGroup::new();
    for (n, t) in p.iter().filter(|(n, _)| n.starts_with("ctx.")) {
        ap.insert(n.clone(), t.clone());
    }
    let attn = ContextualAttention::from_params("ctx", HEADS, ap)?;
    let table = bb.bind(g, "item_table")?;
    let e = g.embedding(table, &c.batch.ids)?;
    let prompt = g.bind(p, "prompt")?;
    let e = g.add_tail(e, prompt, N, T)?;
    let et = g.constant(&c.et);
    let ctx = attn.forward_with(g, et, p)?;
    let row = g.gather_rows(ctx, &[2])?;
    let e = g.add_tail_vec(e, row, LAMBDA as f32, N, T)?;
    let h = bb.encode(g, e, &c.batch, None)?;
    let z = g.gather_rows(h, &c.batch.last_rows())?;
    let (w, b) = (g.bind(p, "adapter.w")?, g.bind(p, "adapter.b")?);
    let y = g.matmul(z, w)?;
    let y = g.add_bias(y, b)?;
    let ce = g.cross_entropy(y, &LABELS)?;
    let items = g.embedding(table, &LINK_ITEMS)?;
    let s = g.row_dot(z, items)?;
    let bce = g.bce_with_logits(s, &LINK_TARGETS)?;
    g.add(ce, bce)
}

type Params64 = std::collections::BTreeMap<String, Vec<f64>>;

fn mm(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = (0..k).map(|x| a[i * k + x] * b[x * c + j]).sum();
        }
    }
    out
}

fn ln(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * rs * gamma[j] + beta[j]));
    }
    out
}

/// Multi-head attention over groups of `len` rows; `allowed(i, j)` within a group.
fn mha(x: &[f64], p: &Params64, prefix: &str, len: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<f64> {
    let r = x.len() / D;
    let dh = D / HEADS;
    let mut cat = vec![0.0; r * D];
    for m in 0..HEADS {
        let q = mm(x, &p[&format!("{prefix}wq{m}")], r, D, dh);
        let k = mm(x, &p[&format!("{prefix}wk{m}")], r, D, dh);
        let v = mm(x, &p[&format!("{prefix}wv{m}")], r, D, dh);
        for i in 0..r {
            let base = i / len * len;
            let js: Vec<usize> = (base..base + len).filter(|&j| allowed(i, j)).collect();
            if js.is_empty() {
                continue;
            }
            let s: Vec<f64> = js
                .iter()
                .map(|&j| (0..dh).map(|c| q[i * dh + c] * k[j * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for (wi, &j) in w.iter().zip(&js) {
                for c in 0..dh {
                    cat[i * D + m * dh + c] += wi / z * v[j * dh + c];
                }
            }
        }
    }
    mm(&cat, &p[&format!("{prefix}wo")], r, D, D)
}

/// Independent double-precision evaluation of [`composed_loss`].
pub fn reference_loss(c: &Composed, p: &Params64) -> f64 {
    let ids = &c.batch.ids;
    let valid = &c.batch.valid;
    let rows = ids.len();
    let table = &p["item_table"];
    let mut x: Vec<f64> = ids.iter().flat_map(|&i| table[i * D..(i + 1) * D].to_vec()).collect();
    let et: Vec<f64> = c.et.data().iter().map(|&v| v as f64).collect();
    let ctx = mha(&et, p, "ctx.", 3, &|_, _| true);
    for r in 0..rows {
        let j = r % N;
        for col in 0..D {
            if j >= N - T {
                x[r * D + col] += p["prompt"][j * D + col] + LAMBDA * ctx[2 * D + col];
            }
            x[r * D + col] += p["pos_emb"][j * D + col];
        }
    }
    let mask = |x: &mut Vec<f64>| {
        for r in 0..rows {
            if !valid[r] {
                x[r * D..(r + 1) * D].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    };
    mask(&mut x);
    let h = ln(&x, &p["block0.ln1.gamma"], &p["block0.ln1.beta"]);
    let a = mha(&h, p, "block0.attn.", N, &|i, j| j <= i && valid[j]);
    x.iter_mut().zip(&a).for_each(|(v, d)| *v += d);
    let h = ln(&x, &p["block0.ln2.gamma"], &p["block0.ln2.beta"]);
    let mut f = mm(&h, &p["block0.ffn.w1"], rows, D, D);
    for (i, v) in f.iter_mut().enumerate() {
        *v = (*v + p["block0.ffn.b1"][i % D]).max(0.0);
    }
    let f = mm(&f, &p["block0.ffn.w2"], rows, D, D);
    for (i, v) in x.iter_mut().enumerate() {
        *v += f[i] + p["block0.ffn.b2"][i % D];
    }
    mask(&mut x);
    let mut x = ln(&x, &p["final_ln.gamma"], &p["final_ln.beta"]);
    mask(&mut x);
    let z: Vec<f64> = c.batch.last_rows().iter().flat_map(|&r| x[r * D..(r + 1) * D].to_vec()).collect();
    let y = mm(&z, &p["adapter.w"], 2, D, CLASSES);
    let mut ce = 0.0;
    for (i, &label) in LABELS.iter().enumerate() {
        let row: Vec<f64> = (0..CLASSES).map(|k| y[i * CLASSES + k] + p["adapter.b"][k]).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        ce += lse - row[label];
    }
    let mut bce = 0.0;
    for (i, (&item, &t)) in LINK_ITEMS.iter().zip(&LINK_TARGETS).enumerate() {
        let s: f64 = (0..D).map(|k| z[i * D + k] * table[item * D + k]).sum();
        bce += s.max(0.0) - s * t as f64 + (-s.abs()).exp().ln_1p();
    }
    ce / LABELS.len() as f64 + bce / LINK_ITEMS.len() as f64
}

fn params64(p: &ParameterGroup) -> Params64 {
    p.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|&v| v as f64).collect())).collect()
}

/// Forward agreement `(f32 loss, f64 loss)` of the composed loss.
pub fn composed_forward() -> (f64, f64) {
    let c = composed_setup();
    let mut g = Graph::new();
    let l = composed_loss(&c, &mut g, &c.params).unwrap();
    (g.scalar(l) as f64, reference_loss(&c, &params64(&c.params)))
}

/// Largest per-tensor relative error of the tape gradient against central
/// differences of the double-precision reference.
pub fn composed() -> f64 {
    let c = composed_setup();
    let mut g = Graph::new();
    let l = composed_loss(&c, &mut g, &c.params).unwrap();
    let grads = g.backward(l).unwrap();
    let base = params64(&c.params);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (name, values) in &base {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| vec![0.0; values.len()]);
        let numeric: Vec<f64> = (0..values.len())
            .map(|i| {
                let mut q = base.clone();
                q.get_mut(name).unwrap()[i] += h;
                let up = reference_loss(&c, &q);
                q.get_mut(name).unwrap()[i] -= 2.0 * h;
                (up - reference_loss(&c, &q)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
