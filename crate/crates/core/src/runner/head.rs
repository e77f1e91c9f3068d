//! Per-task parameters around the backbone and the prompted forward pass.

use crate::backbone::{sample_negative, Backbone, SeqBatch};
use crate::data::Dataset;
use crate::error::{ensure, PclError, Result};
use crate::metrics::{self, RankingProtocol};
use crate::prompt::{
    feature_sequence_fusion, fuse_contextual, fuse_position_prompts, ContextualAttention, PromptBankEntry,
};
use crate::rng::Rng;
use crate::task::{AdapterShape, TaskKind, TaskSpec};
use crate::tensor::{Graph, ParameterGroup, Tensor, Var};

use super::Example;

pub(crate) fn pname(task: usize, field: &str) -> String {
    format!("task{task}.{field}")
}

/// Contextual attention that is still being trained; its weights live in
/// the head's parameter group.
#[derive(Clone, Debug)]
pub(crate) struct LiveCtx {
    pub attn: ContextualAttention,
    pub et: Tensor,
    pub row: usize,
}

/// Task-specific parameters: prompt, contextual prompt, adapter, attribute
/// table and cold-start rows, all under `task{k}.*`.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    pub task: usize,
    pub params: ParameterGroup,
    pub live_ctx: Option<LiveCtx>,
    pub lambda: f32,
    pub window: usize,
    pub cold_ids: Vec<usize>,
    pub adapter_layers: usize,
}

impl Head {
    pub fn empty(task: usize, window: usize) -> Self {
        Head {
            task,
            params: ParameterGroup::new(),
            live_ctx: None,
            lambda: 0.0,
            window,
            cold_ids: Vec::new(),
            adapter_layers: 0,
        }
    }

    fn has(&self, field: &str) -> bool {
        self.params.contains(&pname(self.task, field))
    }

    fn bind(&self, g: &mut Graph, field: &str) -> Result<Var> {
        g.bind(&self.params, &pname(self.task, field))
    }

    pub fn add_adapter(&mut self, shape: &AdapterShape, d: usize, classes: usize, rng: &mut Rng) {
        let dims: Vec<usize> = match shape {
            AdapterShape::None => return,
            AdapterShape::Linear => vec![d, classes],
            AdapterShape::Mlp(hidden) => std::iter::once(d).chain(hidden.iter().copied()).chain([classes]).collect(),
        };
        for (i, w) in dims.windows(2).enumerate() {
            let std = (2.0 / (w[0] + w[1]) as f32).sqrt();
            self.params.insert(pname(self.task, &format!("adapter.w{i}")), Tensor::randn(&[w[0], w[1]], std, rng));
            self.params.insert(pname(self.task, &format!("adapter.b{i}")), Tensor::zeros(&[w[1]]));
        }
        self.adapter_layers = dims.len() - 1;
    }

    /// Freezes the contextual attention into a stored `ctx_prompt` vector.
    /// Returns the attention weights that were removed from the head.
    pub fn finalize(&mut self) -> Result<Option<ParameterGroup>> {
        let Some(live) = self.live_ctx.take() else {
            self.params.freeze_all();
            return Ok(None);
        };
        let mut g = Graph::inference();
        let et = g.constant(&live.et);
        let out = live.attn.forward_with(&mut g, et, &self.params)?;
        let row = g.gather_rows(out, &[live.row])?;
        let ctx = Tensor::new(vec![live.et.cols()], g.value(row).to_vec())?;
        let mut weights = ParameterGroup::new();
        for name in live.attn.params().names() {
            if let Some(t) = self.params.get(name) {
                weights.insert(name.clone(), t.clone());
            }
        }
        let mut kept = ParameterGroup::new();
        for (name, t) in self.params.iter() {
            if !weights.contains(name) {
                kept.insert(name.clone(), t.clone());
            }
        }
        kept.insert(pname(self.task, "ctx_prompt"), ctx);
        kept.freeze_all();
        self.params = kept;
        Ok(Some(weights))
    }

    pub fn to_entry(&self) -> PromptBankEntry {
        let k = self.task;
        let get = |f: &str| self.params.get(&pname(k, f)).cloned();
        let mut adapter = ParameterGroup::new();
        for (name, t) in self.params.iter() {
            if name.starts_with(&pname(k, "adapter.")) {
                adapter.insert(name.clone(), t.clone());
            }
        }
        PromptBankEntry {
            task: k,
            prompt: get("prompt"),
            ctx_prompt: get("ctx_prompt"),
            lambda: self.lambda,
            adapter,
            attr_table: get("attr"),
            cold_rows: get("cold"),
        }
    }

    pub fn from_entry(e: &PromptBankEntry, window: usize, cold_ids: &[usize]) -> Result<Self> {
        let k = e.task;
        let mut h = Head::empty(k, window);
        h.lambda = e.lambda;
        for (f, t) in
            [("prompt", &e.prompt), ("ctx_prompt", &e.ctx_prompt), ("attr", &e.attr_table), ("cold", &e.cold_rows)]
        {
            if let Some(t) = t {
                h.params.insert(pname(k, f), t.clone());
            }
        }
        for (name, t) in e.adapter.iter() {
            h.params.insert(name.clone(), t.clone());
        }
        h.adapter_layers = (0..).take_while(|i| h.has(&format!("adapter.w{i}"))).count();
        if let Some(c) = &e.cold_rows {
            ensure!(
                c.rows() == cold_ids.len(),
                Load,
                "task {k} stores {} cold rows for {} cold items",
                c.rows(),
                cold_ids.len()
            );
            h.cold_ids = cold_ids.to_vec();
        }
        h.params.freeze_all();
        Ok(h)
    }

    pub fn prompt_values(&self) -> usize {
        ["prompt", "ctx_prompt"].iter().filter_map(|f| self.params.get(&pname(self.task, f))).map(Tensor::numel).sum()
    }

    /// Item table with this task's cold rows substituted.
    pub fn table(&self, g: &mut Graph, bb: &Backbone) -> Result<Var> {
        let table = bb.bind(g, "item_table")?;
        if self.has("cold") {
            let cold = self.bind(g, "cold")?;
            return g.override_rows(table, cold, &self.cold_ids);
        }
        Ok(table)
    }

    /// Behavior latents of `inputs` after prompt fusion.
    pub fn latents(
        &self,
        g: &mut Graph,
        bb: &Backbone,
        ds: &Dataset,
        table: Var,
        inputs: &[&[usize]],
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let n = bb.config().n;
        let batch = SeqBatch::from_sequences(inputs, n);
        let mut e = g.embedding(table, &batch.ids)?;
        if self.has("attr") {
            let attr = self.bind(g, "attr")?;
            e = feature_sequence_fusion(g, e, attr, &ds.attr_ids(&batch.ids))?;
        }
        if self.has("prompt") {
            let p = self.bind(g, "prompt")?;
            e = fuse_position_prompts(g, e, p, n, self.window)?;
        }
        if let Some(live) = &self.live_ctx {
            let et = g.constant(&live.et);
            let out = live.attn.forward_with(g, et, &self.params)?;
            let row = g.gather_rows(out, &[live.row])?;
            e = fuse_contextual(g, e, row, self.lambda, n, self.window)?;
        } else if self.has("ctx_prompt") {
            let c = self.bind(g, "ctx_prompt")?;
            e = fuse_contextual(g, e, c, self.lambda, n, self.window)?;
        }
        let h = bb.encode(g, e, &batch, dropout)?;
        g.gather_rows(h, &batch.last_rows())
    }

    pub fn adapter(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for i in 0..self.adapter_layers {
            let w = self.bind(g, &format!("adapter.w{i}"))?;
            let b = self.bind(g, &format!("adapter.b{i}"))?;
            x = g.matmul(x, w)?;
            x = g.add_bias(x, b)?;
            if i + 1 < self.adapter_layers {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Training loss of one mini-batch.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        bb: &Backbone,
        ds: &Dataset,
        spec: &TaskSpec,
        batch: &[&Example],
        negatives: usize,
        neg_rng: &mut Rng,
        dropout: &mut Rng,
    ) -> Result<Var> {
        let inputs: Vec<&[usize]> = batch.iter().map(|e| e.input.as_slice()).collect();
        let table = self.table(g, bb)?;
        let z = self.latents(g, bb, ds, table, &inputs, Some(dropout))?;
        match spec.kind {
            TaskKind::Classification => {
                ensure!(self.adapter_layers > 0, Config, "classification task {} has no adapter", spec.id);
                let logits = self.adapter(g, z)?;
                let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
                g.cross_entropy(logits, &labels)
            }
            TaskKind::Link => {
                let mut rows = Vec::with_capacity(batch.len() * (1 + negatives));
                let mut items = Vec::with_capacity(rows.capacity());
                let mut ys = Vec::with_capacity(rows.capacity());
                for (r, e) in batch.iter().enumerate() {
                    rows.push(r);
                    items.push(e.label);
                    ys.push(1.0);
                }
                for _ in 0..negatives {
                    for (r, e) in batch.iter().enumerate() {
                        rows.push(r);
                        items.push(sample_negative(neg_rng, bb.num_items(), e.label));
                        ys.push(0.0);
                    }
                }
                let zs = g.gather_rows(z, &rows)?;
                let es = g.embedding(table, &items)?;
                let logits = g.row_dot(zs, es)?;
                g.bce_with_logits(logits, &ys)
            }
        }
    }

    /// Inference latents and the effective item table.
    pub fn infer(&self, bb: &Backbone, ds: &Dataset, examples: &[Example]) -> Result<(Vec<Vec<f32>>, Tensor)> {
        let d = bb.config().d;
        let mut out = Vec::with_capacity(examples.len());
        let mut table_t = None;
        for chunk in examples.chunks(256) {
            let mut g = Graph::inference();
            let table = self.table(&mut g, bb)?;
            let inputs: Vec<&[usize]> = chunk.iter().map(|e| e.input.as_slice()).collect();
            let z = self.latents(&mut g, bb, ds, table, &inputs, None)?;
            out.extend(g.value(z).chunks(d).map(<[f32]>::to_vec));
            if table_t.is_none() {
                table_t = Some(g.tensor(table));
            }
        }
        let table = table_t.ok_or_else(|| PclError::Contract("evaluation over no examples".into()))?;
        Ok((out, table))
    }

    pub fn logits(&self, latents: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let d = latents[0].len();
        let mut g = Graph::inference();
        let z = g.constant_data(vec![latents.len(), d], latents.concat())?;
        let y = self.adapter(&mut g, z)?;
        let c = g.shape(y)[1];
        Ok(g.value(y).chunks(c).map(<[f32]>::to_vec).collect())
    }
}

/// Named metric values of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Scores {
    pub rows: Vec<(String, String, f64)>,
    /// Value of the task's selection metric.
    pub primary: f64,
}

pub(crate) fn evaluate(
    bb: &Backbone,
    head: &Head,
    ds: &Dataset,
    spec: &TaskSpec,
    examples: &[Example],
    protocol: RankingProtocol,
    ks: &[usize],
) -> Result<Scores> {
    let (latents, table) = head.infer(bb, ds, examples)?;
    match spec.kind {
        TaskKind::Classification => {
            let logits = head.logits(&latents)?;
            let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
            let acc = metrics::accuracy(&logits, &labels, spec.labels)?;
            Ok(Scores { rows: vec![("acc".into(), "-".into(), acc)], primary: acc })
        }
        TaskKind::Link => {
            let targets: Vec<usize> = examples.iter().map(|e| e.label).collect();
            let hist: Vec<&[usize]> = examples.iter().map(|e| e.input.as_slice()).collect();
            let users: Vec<usize> = examples.iter().map(|e| e.user).collect();
            let ranks = metrics::target_ranks(&table, &latents, &targets, &hist, &users, protocol)?;
            let cands = examples
                .iter()
                .map(|e| metrics::candidate_count(protocol, bb.num_items(), e.label, &e.input))
                .min()
                .unwrap_or(0);
            let mut rows = Vec::new();
            for &k in ks {
                rows.push((format!("hr@{k}"), protocol.name().to_string(), metrics::hit_ratio(&ranks, k, cands)?));
            }
            let crate::task::Metric::HitRatio(k) = spec.metric else {
                return Err(PclError::Config(format!("link task {} must use hr@K", spec.id)));
            };
            let primary = metrics::hit_ratio(&ranks, k, cands)?;
            Ok(Scores { rows, primary })
        }
    }
}
