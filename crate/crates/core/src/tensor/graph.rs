//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse insertion order, so gradient accumulation order is fixed
//! for a fixed graph. Parameters enter the tape through [`Graph::param`] and
//! come back out by name in the returned [`GradientMap`].

use crate::error::{ensure, PclError, Result};
use crate::tensor::{GradientMap, ParameterGroup, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys a query row may attend to.
#[derive(Clone, Debug, Default)]
pub struct AttentionMask {
    pub causal: bool,
    /// Per-row validity over all `groups * len` rows; invalid rows are never
    /// attended to.
    pub key_valid: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    MulConst(usize, Vec<f32>),
    Relu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: usize, ids: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    MaskRows { x: usize, keep: Vec<bool> },
    OverrideRows { base: usize, values: usize, rows: Vec<usize> },
    AddTail { e: usize, p: usize, len: usize, t: usize },
    AddTailVec { e: usize, v: usize, scale: f32, len: usize, t: usize },
    ConcatCols(Vec<usize>),
    RowDot(usize, usize),
    Attention { q: usize, k: usize, v: usize, len: usize, probs: Vec<f32>, scale: f32 },
    Bce { logits: usize, targets: Vec<f32> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Vec<f32>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inference: bool,
}

fn check_finite(value: &[f32], op: &'static str) -> Result<()> {
    if value.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(PclError::NonFinite(op))
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records no gradient paths; parameters bind as constants.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), inference: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f32>, shape: Vec<usize>, op: Op, op_name: &'static str) -> Result<Var> {
        check_finite(&value, op_name)?;
        let needs_grad = !self.inference && self.op_inputs(&op).iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, shape, op, needs_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::RowDot(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::MulConst(x, _) | Op::Relu(x) | Op::Softmax(x) | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::GatherRows { x, .. } | Op::MaskRows { x, .. } => vec![*x],
            Op::OverrideRows { base, values, .. } => vec![*base, *values],
            Op::AddTail { e, p, .. } => vec![*e, *p],
            Op::AddTailVec { e, v, .. } => vec![*e, *v],
            Op::ConcatCols(xs) => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Bce { logits, .. } | Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_data(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Binds a named tensor; it receives gradient iff it requires grad and
    /// the graph is not in inference mode.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.constant(t);
        let node = &mut self.nodes[v.0];
        node.needs_grad = !self.inference && t.requires_grad();
        node.param = Some(name.to_string());
        v
    }

    /// Binds `name` from `group`; frozen entries enter as constants.
    pub fn bind(&mut self, group: &ParameterGroup, name: &str) -> Result<Var> {
        let t = group.require(name)?;
        let v = self.param(name, t);
        if group.is_frozen(name) {
            self.nodes[v.0].needs_grad = false;
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are finite and well-shaped")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        ensure!(s.len() == 2, Dimension, "{what}: expected a matrix, got shape {s:?}");
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, p) = self.mat(b, "matmul rhs")?;
        ensure!(k == k2, Dimension, "matmul inner dimensions {m}x{k} * {k2}x{p}");
        let out = matmul_raw(self.value(a), self.value(b), m, k, p);
        self.push(out, vec![m, p], Op::MatMul(a.0, b.0), "matmul")
    }

    /// `a · bᵀ` for `a: m×k`, `b: p×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_t lhs")?;
        let (p, k2) = self.mat(b, "matmul_t rhs")?;
        ensure!(k == k2, Dimension, "matmul_t inner dimensions {m}x{k} * ({p}x{k2})ᵀ");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0f32; m * p];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..p {
                out[i * p + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        self.push(out, vec![m, p], Op::MatMulT(a.0, b.0), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), Dimension, "add {:?} + {:?}", self.shape(a), self.shape(b));
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Add(a.0, b.0), "add")
    }

    /// Adds a length-c vector to every row of an r×c matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.mat(a, "add_bias")?;
        ensure!(self.value(b).len() == c, Dimension, "bias of {} for {c} columns", self.value(b).len());
        let bv = self.value(b);
        let out = self.value(a).chunks(c).flat_map(|r| r.iter().zip(bv).map(|(x, y)| x + y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::AddBias(a.0, b.0), "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), Dimension, "mul {:?} * {:?}", self.shape(a), self.shape(b));
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a.0, s), "scale")
    }

    /// Element-wise product with a constant factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f32>) -> Result<Var> {
        ensure!(factor.len() == self.value(a).len(), Dimension, "mul_const length");
        let out = self.value(a).iter().zip(&factor).map(|(x, f)| x * f).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::MulConst(a.0, factor), "mul_const")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Relu(a.0), "relu")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Softmax(x.0), "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (r, d) = self.mat(x, "layer_norm")?;
        ensure!(
            self.value(gamma).len() == d && self.value(beta).len() == d,
            Dimension,
            "layer_norm affine parameters must have {d} entries"
        );
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; r * d];
        let mut rstd = vec![0.0f32; r];
        let mut out = vec![0.0f32; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push(out, vec![r, d], Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, "layer_norm")
    }

    /// Row gather from a V×d table. Id 0 is padding: it yields a zero row and
    /// sends no gradient back.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table, "embedding table")?;
        let tv = self.value(table);
        let mut out = vec![0.0f32; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(PclError::Index(format!("id {id} outside table of {v} rows")));
            }
            if id != 0 {
                out[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        ensure!(!ids.is_empty(), Dimension, "embedding lookup with no ids");
        self.push(out, vec![ids.len(), d], Op::Embedding { table: table.0, ids: ids.to_vec() }, "embedding")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(x, "gather_rows")?;
        ensure!(!idx.is_empty(), Dimension, "gather_rows with no indices");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(PclError::Index(format!("row {i} of {r}")));
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        self.push(out, vec![idx.len(), c], Op::GatherRows { x: x.0, idx: idx.to_vec() }, "gather_rows")
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (r, c) = self.mat(x, "mask_rows")?;
        ensure!(keep.len() == r, Dimension, "mask of {} for {r} rows", keep.len());
        let mut out = self.value(x).to_vec();
        for (row, &k) in out.chunks_mut(c).zip(keep) {
            if !k {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push(out, vec![r, c], Op::MaskRows { x: x.0, keep: keep.to_vec() }, "mask_rows")
    }

    /// Copy of `base` with `rows[i]` replaced by row `i` of `values`.
    pub fn override_rows(&mut self, base: Var, values: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(base, "override_rows base")?;
        let (vr, vc) = self.mat(values, "override_rows values")?;
        ensure!(
            vr == rows.len() && vc == c,
            Dimension,
            "override values {vr}x{vc} for {} rows of width {c}",
            rows.len()
        );
        let mut out = self.value(base).to_vec();
        let vv = self.value(values);
        for (i, &row) in rows.iter().enumerate() {
            if row >= r {
                return Err(PclError::Index(format!("override row {row} of {r}")));
            }
            out[row * c..(row + 1) * c].copy_from_slice(&vv[i * c..(i + 1) * c]);
        }
        self.push(
            out,
            vec![r, c],
            Op::OverrideRows { base: base.0, values: values.0, rows: rows.to_vec() },
            "override_rows",
        )
    }

    /// `e` holds `groups` stacked sequences of `len` rows. Adds the
    /// right-aligned rows of `p` to the last `t` rows of every sequence:
    /// row `j` of a sequence receives row `p_rows - len + j` of `p`.
    pub fn add_tail(&mut self, e: Var, p: Var, len: usize, t: usize) -> Result<Var> {
        let (r, d) = self.mat(e, "add_tail input")?;
        let (pr, pd) = self.mat(p, "add_tail prompt")?;
        ensure!(t <= len, Contract, "window {t} exceeds sequence length {len}");
        ensure!(len > 0 && r % len == 0, Dimension, "{r} rows are not a multiple of {len}");
        ensure!(pd == d && pr >= len, Dimension, "prompt {pr}x{pd} for sequences {len}x{d}");
        let off = pr - len;
        let pv = self.value(p);
        let mut out = self.value(e).to_vec();
        for g in 0..r / len {
            for j in len - t..len {
                let dst = &mut out[(g * len + j) * d..(g * len + j + 1) * d];
                let src = &pv[(off + j) * d..(off + j + 1) * d];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        self.push(out, vec![r, d], Op::AddTail { e: e.0, p: p.0, len, t }, "add_tail")
    }

    /// Adds `scale * v` to the last `t` rows of every stacked sequence.
    pub fn add_tail_vec(&mut self, e: Var, v: Var, scale: f32, len: usize, t: usize) -> Result<Var> {
        let (r, d) = self.mat(e, "add_tail_vec input")?;
        ensure!(t <= len, Contract, "window {t} exceeds sequence length {len}");
        ensure!(len > 0 && r % len == 0, Dimension, "{r} rows are not a multiple of {len}");
        ensure!(self.value(v).len() == d, Dimension, "vector of {} for width {d}", self.value(v).len());
        let vv: Vec<f32> = self.value(v).iter().map(|x| scale * x).collect();
        let mut out = self.value(e).to_vec();
        for g in 0..r / len {
            for j in len - t..len {
                let dst = &mut out[(g * len + j) * d..(g * len + j + 1) * d];
                dst.iter_mut().zip(&vv).for_each(|(a, b)| *a += b);
            }
        }
        self.push(out, vec![r, d], Op::AddTailVec { e: e.0, v: v.0, scale, len, t }, "add_tail_vec")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), Dimension, "concat of nothing");
        let (r, _) = self.mat(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = self.mat(x, "concat_cols")?;
            ensure!(rx == r, Dimension, "concat_cols row mismatch {rx} vs {r}");
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        self.push(out, vec![r, total], Op::ConcatCols(xs.iter().map(|v| v.0).collect()), "concat_cols")
    }

    /// Row-wise dot product of two r×d matrices, giving a length-r vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, d) = self.mat(a, "row_dot")?;
        ensure!(self.shape(b) == [r, d], Dimension, "row_dot {:?} vs {:?}", self.shape(a), self.shape(b));
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..r).map(|i| dot(&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d])).collect();
        self.push(out, vec![r], Op::RowDot(a.0, b.0), "row_dot")
    }

    /// Scaled dot-product attention over `groups` independent blocks of
    /// `len` rows. Queries with no admissible key produce a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, len: usize, mask: &AttentionMask) -> Result<Var> {
        let (r, dh) = self.mat(q, "attention q")?;
        ensure!(self.shape(k) == [r, dh] && self.shape(v) == [r, dh], Dimension, "attention q/k/v shapes differ");
        ensure!(len > 0 && r % len == 0, Dimension, "{r} rows are not a multiple of {len}");
        if let Some(valid) = &mask.key_valid {
            ensure!(valid.len() == r, Dimension, "key mask of {} for {r} rows", valid.len());
        }
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0f32; r * len];
        let mut out = vec![0.0f32; r * dh];
        let mut scores = vec![0.0f32; len];
        for g in 0..r / len {
            let base = g * len;
            for i in 0..len {
                let qi = &qv[(base + i) * dh..(base + i + 1) * dh];
                let mut any = false;
                let mut max = f32::NEG_INFINITY;
                for j in 0..len {
                    if admissible(mask, base, i, j) {
                        let s = dot(qi, &kv[(base + j) * dh..(base + j + 1) * dh]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let prow = &mut probs[(base + i) * len..(base + i + 1) * len];
                let mut sum = 0.0f32;
                for j in 0..len {
                    if admissible(mask, base, i, j) {
                        let e = (scores[j] - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                }
                let orow = &mut out[(base + i) * dh..(base + i + 1) * dh];
                for j in 0..len {
                    if prow[j] != 0.0 {
                        prow[j] /= sum;
                        let vj = &vv[(base + j) * dh..(base + j + 1) * dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += prow[j] * x);
                    }
                }
            }
        }
        self.push(out, vec![r, dh], Op::Attention { q: q.0, k: k.0, v: v.0, len, probs, scale }, "attention")
    }

    /// Mean binary cross-entropy on logits, computed in the stable
    /// `max(x,0) - x·y + ln(1 + e^-|x|)` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let lv = self.value(logits);
        ensure!(lv.len() == targets.len(), Dimension, "{} logits for {} targets", lv.len(), targets.len());
        ensure!(!lv.is_empty(), Dimension, "bce over no logits");
        let total: f32 = lv.iter().zip(targets).map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()).sum();
        let out = vec![total / lv.len() as f32];
        self.push(out, vec![], Op::Bce { logits: logits.0, targets: targets.to_vec() }, "bce_with_logits")
    }

    /// Mean softmax cross-entropy of r×C logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(logits, "cross_entropy")?;
        ensure!(labels.len() == r, Dimension, "{} labels for {r} rows", labels.len());
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f32;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            ensure!(labels[i] < c, Index, "label {} for {c} classes", labels[i]);
            softmax_in_place(row);
            total -= row[labels[i]].max(f32::MIN_POSITIVE).ln();
        }
        self.push(
            vec![total / r as f32],
            vec![],
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![], Op::Sum(x.0), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        self.push(vec![s], vec![], Op::Mean(x.0), "mean")
    }

    /// Reverse sweep from a scalar loss. Returns the gradient of every bound
    /// trainable parameter, keyed by name.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        ensure!(
            self.nodes[loss.0].value.len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut out = GradientMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.needs_grad) {
                let g = grads[i].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
                match out.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[idx].needs_grad {
                let g = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[*a].shape);
                let p = node.shape[1];
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for l in 0..k {
                            ga[r * k + l] += dot(&gout[r * p..(r + 1) * p], &bv[l * p..(l + 1) * p]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        for l in 0..k {
                            let a_rl = av[r * k + l];
                            let row = &mut gb[l * p..(l + 1) * p];
                            row.iter_mut().zip(&gout[r * p..(r + 1) * p]).for_each(|(g, x)| *g += a_rl * x);
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(&nodes[*a].shape);
                let p = node.shape[1];
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let row = &mut ga[r * k..(r + 1) * k];
                        for j in 0..p {
                            let g = gout[r * p + j];
                            row.iter_mut().zip(&bv[j * k..(j + 1) * k]).for_each(|(x, y)| *x += g * y);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        for j in 0..p {
                            let g = gout[r * p + j];
                            let row = &mut gb[j * k..(j + 1) * k];
                            row.iter_mut().zip(&av[r * k..(r + 1) * k]).for_each(|(x, y)| *x += g * y);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                let c = nodes[*b].value.len();
                acc(*b, &mut |g| {
                    for row in gout.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |g| g.iter_mut().zip(gout).zip(bv).for_each(|((x, o), y)| *x += o * y));
                acc(*b, &mut |g| g.iter_mut().zip(gout).zip(av).for_each(|((x, o), y)| *x += o * y));
            }
            Op::Scale(a, s) => acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, o)| *x += s * o)),
            Op::MulConst(a, f) => acc(*a, &mut |g| g.iter_mut().zip(gout).zip(f).for_each(|((x, o), y)| *x += o * y)),
            Op::Relu(a) => {
                let av = &nodes[*a].value;
                acc(*a, &mut |g| {
                    g.iter_mut().zip(gout).zip(av).for_each(|((x, o), v)| {
                        if *v > 0.0 {
                            *x += o
                        }
                    })
                });
            }
            Op::Softmax(a) => {
                let (_, c) = dims2(&node.shape);
                let y = &node.value;
                acc(*a, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                        let s = dot(yr, dr);
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, d) = dims2(&node.shape);
                let gv = &nodes[*gamma].value;
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0f32; d];
                    for i in 0..r {
                        let go = &gout[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = go[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f32>() / d as f32;
                        let m2 = dot(&dxhat, xh) / d as f32;
                        for j in 0..d {
                            g[i * d + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for i in 0..r {
                        for j in 0..d {
                            g[j] += gout[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for row in gout.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        if id != 0 {
                            add_into(&mut g[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &gout[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::MaskRows { x, keep } => {
                let c = node.shape[1];
                acc(*x, &mut |g| {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            add_into(&mut g[r * c..(r + 1) * c], &gout[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::OverrideRows { base, values, rows } => {
                let c = node.shape[1];
                acc(*base, &mut |g| {
                    let mut masked = gout.to_vec();
                    for &row in rows {
                        masked[row * c..(row + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_into(g, &masked);
                });
                acc(*values, &mut |g| {
                    for (i, &row) in rows.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &gout[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::AddTail { e, p, len, t } => {
                let d = node.shape[1];
                let groups = node.shape[0] / len;
                let off = nodes[*p].shape[0] - len;
                acc(*e, &mut |g| add_into(g, gout));
                acc(*p, &mut |g| {
                    for grp in 0..groups {
                        for j in len - t..*len {
                            let src = &gout[(grp * len + j) * d..(grp * len + j + 1) * d];
                            add_into(&mut g[(off + j) * d..(off + j + 1) * d], src);
                        }
                    }
                });
            }
            Op::AddTailVec { e, v, scale, len, t } => {
                let d = node.shape[1];
                let groups = node.shape[0] / len;
                acc(*e, &mut |g| add_into(g, gout));
                acc(*v, &mut |g| {
                    for grp in 0..groups {
                        for j in len - t..*len {
                            let src = &gout[(grp * len + j) * d..(grp * len + j + 1) * d];
                            g.iter_mut().zip(src).for_each(|(x, s)| *x += scale * s);
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &x in xs {
                    let w = nodes[x].shape[1];
                    acc(x, &mut |g| {
                        for i in 0..r {
                            add_into(&mut g[i * w..(i + 1) * w], &gout[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::RowDot(a, b) => {
                let (r, d) = dims2(&nodes[*a].shape);
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |g| {
                    for i in 0..r {
                        g[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&bv[i * d..(i + 1) * d])
                            .for_each(|(x, y)| *x += gout[i] * y);
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..r {
                        g[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&av[i * d..(i + 1) * d])
                            .for_each(|(x, y)| *x += gout[i] * y);
                    }
                });
            }
            Op::Attention { q, k, v, len, probs, scale } => {
                let (r, dh) = dims2(&node.shape);
                let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let len = *len;
                // dS for every (query, key) pair, then the three projections.
                let mut ds = vec![0.0f32; r * len];
                for g in 0..r / len {
                    let base = g * len;
                    for i in 0..len {
                        let prow = &probs[(base + i) * len..(base + i + 1) * len];
                        let go = &gout[(base + i) * dh..(base + i + 1) * dh];
                        let mut dp = vec![0.0f32; len];
                        let mut s = 0.0f32;
                        for j in 0..len {
                            if prow[j] != 0.0 {
                                dp[j] = dot(go, &vv[(base + j) * dh..(base + j + 1) * dh]);
                                s += prow[j] * dp[j];
                            }
                        }
                        for j in 0..len {
                            ds[(base + i) * len + j] = prow[j] * (dp[j] - s);
                        }
                    }
                }
                acc(*v, &mut |gv| {
                    for g in 0..r / len {
                        let base = g * len;
                        for i in 0..len {
                            for j in 0..len {
                                let p = probs[(base + i) * len + j];
                                if p != 0.0 {
                                    let go = &gout[(base + i) * dh..(base + i + 1) * dh];
                                    gv[(base + j) * dh..(base + j + 1) * dh]
                                        .iter_mut()
                                        .zip(go)
                                        .for_each(|(x, o)| *x += p * o);
                                }
                            }
                        }
                    }
                });
                acc(*q, &mut |gq| {
                    for g in 0..r / len {
                        let base = g * len;
                        for i in 0..len {
                            for j in 0..len {
                                let s = ds[(base + i) * len + j] * scale;
                                if s != 0.0 {
                                    let kj = &kv[(base + j) * dh..(base + j + 1) * dh];
                                    gq[(base + i) * dh..(base + i + 1) * dh]
                                        .iter_mut()
                                        .zip(kj)
                                        .for_each(|(x, y)| *x += s * y);
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for g in 0..r / len {
                        let base = g * len;
                        for i in 0..len {
                            for j in 0..len {
                                let s = ds[(base + i) * len + j] * scale;
                                if s != 0.0 {
                                    let qi = &qv[(base + i) * dh..(base + i + 1) * dh];
                                    gk[(base + j) * dh..(base + j + 1) * dh]
                                        .iter_mut()
                                        .zip(qi)
                                        .for_each(|(x, y)| *x += s * y);
                                }
                            }
                        }
                    }
                });
            }
            Op::Bce { logits, targets } => {
                let lv = &nodes[*logits].value;
                let n = lv.len() as f32;
                acc(*logits, &mut |g| {
                    for ((x, &l), &y) in g.iter_mut().zip(lv).zip(targets) {
                        *x += gout[0] * (sigmoid(l) - y) / n;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (r, c) = dims2(&nodes[*logits].shape);
                acc(*logits, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            let y = if labels[i] == j { 1.0 } else { 0.0 };
                            g[i * c + j] += gout[0] * (probs[i * c + j] - y) / r as f32;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f32;
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0] / n));
            }
        }
    }
}

fn admissible(mask: &AttentionMask, base: usize, i: usize, j: usize) -> bool {
    (!mask.causal || j <= i) && mask.key_valid.as_ref().is_none_or(|v| v[base + j])
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il != 0.0 {
                orow.iter_mut().zip(&b[l * p..(l + 1) * p]).for_each(|(o, x)| *o += a_il * x);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mat(g: &mut Graph, r: usize, c: usize, data: &[f32]) -> Var {
        g.constant_data(vec![r, c], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let p = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = mat(&mut g, 2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(p, b).unwrap();
        assert_eq!(g.value(c), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6]);
        let b = mat(&mut g, 2, 2, &[0.0; 4]);
        assert!(matches!(g.matmul(a, b), Err(PclError::Dimension(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = mat(&mut g, 3, 2, &[0.0, 0.0, 0.0, 2f32.ln(), 1000.0, 1000.0]);
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        assert!((v[0] - 0.5).abs() < 1e-7);
        assert!((v[2] - 1.0 / 3.0).abs() < 1e-6 && (v[3] - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(&v[4..], &[0.5, 0.5]);

        let x = mat(&mut g, 1, 3, &[0.0, 0.0, 0.0]);
        let y = g.softmax_rows(x).unwrap();
        for &p in g.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 2, &[5.0, 5.0, 1.0, 3.0]);
        let gamma = g.constant_data(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = g.constant_data(vec![2], vec![0.0, 0.0]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + 1.0).abs() < 1e-5 && (v[3] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn embedding_pad_and_duplicates() {
        let mut g = Graph::new();
        let mut table = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        table.set_requires_grad(true);
        let t = g.param("table", &table);
        let e = g.embedding(t, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(e), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

        let e = g.embedding(t, &[1, 1]).unwrap();
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        let gt = &grads["table"];
        assert_eq!(&gt[3..6], &[2.0, 2.0, 2.0]);
        assert_eq!(&gt[0..3], &[0.0, 0.0, 0.0]);

        assert!(matches!(g.embedding(t, &[3]), Err(PclError::Index(_))));
    }

    #[test]
    fn backward_simple_losses() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng).with_grad();
        let mut g = Graph::new();
        let xv = g.param("x", &x);
        let s = g.sum(xv).unwrap();
        assert_eq!(g.backward(s).unwrap()["x"], vec![1.0; 12]);

        let mut g = Graph::new();
        let xv = g.param("x", &x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        for (a, b) in grads["x"].iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(g.backward(x), Err(PclError::Contract(_))));
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let l = g.constant_data(vec![4], vec![0.0; 4]).unwrap();
        let loss = g.bce_with_logits(l, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((g.scalar(loss) - 2f32.ln()).abs() < 1e-7);

        let l = g.constant_data(vec![2], vec![20.0, -20.0]).unwrap();
        let loss = g.bce_with_logits(l, &[1.0, 0.0]).unwrap();
        assert!(g.scalar(loss) < 1e-6);
    }

    #[test]
    fn non_finite_rejected_at_op_boundary() {
        let mut g = Graph::new();
        let a = g.constant_data(vec![1], vec![3e38]).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(PclError::NonFinite("scale"))));
    }

    #[test]
    fn fully_masked_attention_rows_are_zero() {
        let mut g = Graph::new();
        let q = mat(&mut g, 2, 1, &[1.0, 2.0]);
        let mask = AttentionMask { causal: true, key_valid: Some(vec![false, true]) };
        let o = g.attention(q, q, q, 2, &mask).unwrap();
        assert_eq!(g.value(o), &[0.0, 2.0]);
    }

    #[test]
    fn inference_graph_has_no_gradients() {
        let mut g = Graph::inference();
        let x = g.param("x", &Tensor::zeros(&[2]).with_grad());
        let s = g.sum(x).unwrap();
        assert!(g.backward(s).unwrap().is_empty());
    }
}
