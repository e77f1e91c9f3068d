//! Position-wise prompts, contextual prompts over task descriptions, and
//! their fusion into behavior embedding sequences.
//!
//! For a window of `n` rows, fusion touches only the last `t` rows:
//!
//! ```text
//! E_k  = E_1[:n-t] ‖ (E_1[n-t:] + p_k[n-t:])
//! E'_k = E_k[:n-t] ‖ (E_k[n-t:] + λ·p'_k)
//! ```
//!
//! `p'_k` is row k of a multi-head self-attention over the frozen
//! task-description embeddings `E_T`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, PclError, Result};
use crate::rng::{tag, Rng};
use crate::task::{TaskSpec, PRETRAIN_TASK};
use crate::tensor::graph::AttentionMask;
use crate::tensor::{checkpoint, Graph, ParameterGroup, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// First downstream task draws fresh noise; later tasks copy the
    /// previous task's trained prompt.
    Chain,
    /// Every task draws fresh noise from its own seed.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtxScope {
    /// Attend over tasks seen so far (pretraining task included).
    Visible,
    /// Attend over every task in the manifest.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProviderConfig {
    /// Precomputed vectors from a PCLT file with one tensor per task
    /// named `task{k}`.
    File { path: PathBuf },
    /// SHA-256 of the description text seeds a unit-norm Gaussian vector.
    Hash,
    /// All-zero rows.
    Zero,
    /// Seeded Gaussian rows independent of the description text.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Fusion window `t`.
    pub window: usize,
    /// Contextual prompt intensity.
    #[serde(serialize_with = "crate::config::short_f32")]
    pub lambda: f32,
    pub init: InitMode,
    #[serde(serialize_with = "crate::config::short_f32")]
    pub init_std: f32,
    /// Enables position-wise prompts.
    pub position: bool,
    /// Enables contextual prompts.
    pub contextual: bool,
    pub ctx_scope: CtxScope,
    /// Share one attention layer across tasks instead of one per task.
    pub ctx_shared: bool,
    pub provider: ProviderConfig,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            window: 10,
            lambda: 0.1,
            init: InitMode::Chain,
            init_std: 0.02,
            position: true,
            contextual: true,
            ctx_scope: CtxScope::Visible,
            ctx_shared: false,
            provider: ProviderConfig::Hash,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        ensure!(self.window >= 1 && self.window <= n, Config, "prompt window t={} must be in 1..={n}", self.window);
        ensure!(self.lambda.is_finite(), Config, "lambda must be finite");
        Ok(())
    }
}

/// Adds the last `t` rows of `prompt` to the last `t` rows of each stacked
/// window of `len` rows.
pub fn fuse_position_prompts(g: &mut Graph, e1: Var, prompt: Var, len: usize, t: usize) -> Result<Var> {
    g.add_tail(e1, prompt, len, t)
}

/// Adds `lambda * ctx` to each of the last `t` rows of each window.
pub fn fuse_contextual(g: &mut Graph, ek: Var, ctx: Var, lambda: f32, len: usize, t: usize) -> Result<Var> {
    g.add_tail_vec(ek, ctx, lambda, len, t)
}

/// Adds the attribute embedding of every position (id 0 = no attribute).
pub fn feature_sequence_fusion(g: &mut Graph, e: Var, attr_table: Var, attr_ids: &[usize]) -> Result<Var> {
    let a = g.embedding(attr_table, attr_ids)?;
    g.add(e, a)
}

/// Tensor-level forms of the fusion ops for a single `n×d` window.
pub mod fuse {
    use super::*;

    pub fn position(e1: &Tensor, prompt: &Tensor, t: usize) -> Result<Tensor> {
        ensure!(e1.shape() == prompt.shape(), Dimension, "E {:?} vs p {:?}", e1.shape(), prompt.shape());
        let mut g = Graph::inference();
        let (e, p) = (g.constant(e1), g.constant(prompt));
        let out = fuse_position_prompts(&mut g, e, p, e1.rows(), t)?;
        Ok(g.tensor(out))
    }

    pub fn contextual(ek: &Tensor, ctx: &Tensor, lambda: f32, t: usize) -> Result<Tensor> {
        let mut g = Graph::inference();
        let (e, c) = (g.constant(ek), g.constant(ctx));
        let out = fuse_contextual(&mut g, e, c, lambda, ek.rows(), t)?;
        Ok(g.tensor(out))
    }

    pub fn features(ek: &Tensor, attr_table: &Tensor, attr_ids: &[usize]) -> Result<Tensor> {
        ensure!(attr_ids.len() == ek.rows(), Dimension, "{} attribute ids for {} rows", attr_ids.len(), ek.rows());
        let mut g = Graph::inference();
        let (e, a) = (g.constant(ek), g.constant(attr_table));
        let out = feature_sequence_fusion(&mut g, e, a, attr_ids)?;
        Ok(g.tensor(out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderTag {
    File,
    Hash,
    Zero,
    Random,
}

/// Frozen `|T|×d` description embeddings, one row per task id.
#[derive(Clone, Debug)]
pub struct TaskDescriptionEmbedding {
    pub provider: ProviderTag,
    rows: BTreeMap<usize, Vec<f32>>,
    d: usize,
}

impl TaskDescriptionEmbedding {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &usize> {
        self.rows.keys()
    }

    pub fn row(&self, task: usize) -> Result<&[f32]> {
        self.rows
            .get(&task)
            .map(Vec::as_slice)
            .ok_or_else(|| PclError::Contract(format!("no description embedding for task {task}")))
    }

    /// Stacks the rows of `tasks` in the given order.
    pub fn matrix(&self, tasks: &[usize]) -> Result<Tensor> {
        let rows = tasks.iter().map(|&t| self.row(t).map(<[f32]>::to_vec)).collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Writes the rows in the file-provider layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .rows
            .iter()
            .map(|(k, r)| Ok((format!("task{k}"), Tensor::new(vec![self.d], r.clone())?)))
            .collect::<Result<_>>()?;
        checkpoint::save(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

fn unit_gaussian(seed: u64, d: usize) -> Vec<f32> {
    let mut rng = Rng::new(seed);
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// First 8 bytes (little-endian) of the SHA-256 digest of `text`.
pub fn description_seed(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// The `hash` provider: every lowercased alphanumeric token maps to a
/// unit Gaussian vector seeded by [`description_seed`]; the token vectors
/// are summed and the sum normalized. Descriptions sharing words land
/// close together.
pub fn hash_embedding(text: &str, d: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let v = unit_gaussian(description_seed(&token.to_lowercase()), d);
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x as f64);
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return unit_gaussian(description_seed(text), d);
    }
    acc.iter().map(|x| (x / norm) as f32).collect()
}

pub fn embed_task_descriptions(
    specs: &[TaskSpec],
    provider: &ProviderConfig,
    d: usize,
) -> Result<TaskDescriptionEmbedding> {
    ensure!(d >= 1, Config, "embedding width must be positive");
    let mut rows = BTreeMap::new();
    let tag_ = match provider {
        ProviderConfig::File { path } => {
            let stored: BTreeMap<String, Tensor> = checkpoint::load(path)?.into_iter().collect();
            for s in specs {
                let t = stored
                    .get(&format!("task{}", s.id))
                    .ok_or_else(|| PclError::Load(format!("{} has no vector for task {}", path.display(), s.id)))?;
                ensure!(t.numel() == d, Load, "task {} vector has {} values, expected {d}", s.id, t.numel());
                rows.insert(s.id, t.data().to_vec());
            }
            ProviderTag::File
        }
        ProviderConfig::Hash => {
            for s in specs {
                rows.insert(s.id, hash_embedding(&s.description.text(), d));
            }
            ProviderTag::Hash
        }
        ProviderConfig::Zero => {
            for s in specs {
                rows.insert(s.id, vec![0.0; d]);
            }
            ProviderTag::Zero
        }
        ProviderConfig::Random { seed } => {
            for s in specs {
                let mut rng = Rng::derived(*seed, s.id as u64);
                rows.insert(s.id, rng.normal_vec(d, 1.0 / (d as f32).sqrt()));
            }
            ProviderTag::Random
        }
    };
    Ok(TaskDescriptionEmbedding { provider: tag_, rows, d })
}

/// Multi-head self-attention over task-description rows.
#[derive(Clone, Debug)]
pub struct ContextualAttention {
    prefix: String,
    d: usize,
    heads: usize,
    params: ParameterGroup,
}

impl ContextualAttention {
    /// Parameters are named `{prefix}.wq{m}`, `.wk{m}`, `.wv{m}` (d×d_h) and
    /// `{prefix}.wo` (d×d).
    pub fn new(prefix: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        ensure!(heads >= 1 && d.is_multiple_of(heads), Config, "d={d} is not divisible by h={heads}");
        let dh = d / heads;
        let std = (1.0 / d as f32).sqrt();
        let mut params = ParameterGroup::new();
        for m in 0..heads {
            for w in ["wq", "wk", "wv"] {
                params.insert(format!("{prefix}.{w}{m}"), Tensor::randn(&[d, dh], std, rng));
            }
        }
        params.insert(format!("{prefix}.wo"), Tensor::randn(&[d, d], std, rng));
        Ok(ContextualAttention { prefix: prefix.to_string(), d, heads, params })
    }

    pub fn from_params(prefix: &str, heads: usize, params: ParameterGroup) -> Result<Self> {
        let wo = params.require(&format!("{prefix}.wo"))?;
        let d = wo.cols();
        ensure!(heads >= 1 && d % heads == 0, Config, "d={d} is not divisible by h={heads}");
        Ok(ContextualAttention { prefix: prefix.to_string(), d, heads, params })
    }

    pub fn params(&self) -> &ParameterGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterGroup {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterGroup {
        self.params
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `P_T = Concat(head_1..head_h)·W^O`, `head_m = Attention(E W^Q_m, E W^K_m, E W^V_m)`.
    pub fn forward(&self, g: &mut Graph, et: Var) -> Result<Var> {
        self.forward_with(g, et, &self.params)
    }

    /// Same as [`forward`](Self::forward) but binds the weights from
    /// `params`, which must hold this layer's names.
    pub fn forward_with(&self, g: &mut Graph, et: Var, params: &ParameterGroup) -> Result<Var> {
        ensure!(
            g.shape(et).len() == 2 && g.shape(et)[1] == self.d,
            Dimension,
            "E_T shape {:?} for d={}",
            g.shape(et),
            self.d
        );
        let k = g.shape(et)[0];
        let mut heads = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let wq = g.bind(params, &format!("{}.wq{m}", self.prefix))?;
            let wk = g.bind(params, &format!("{}.wk{m}", self.prefix))?;
            let wv = g.bind(params, &format!("{}.wv{m}", self.prefix))?;
            let q = g.matmul(et, wq)?;
            let kk = g.matmul(et, wk)?;
            let v = g.matmul(et, wv)?;
            heads.push(g.attention(q, kk, v, k, &AttentionMask::default())?);
        }
        let cat = g.concat_cols(&heads)?;
        let wo = g.bind(params, &format!("{}.wo", self.prefix))?;
        g.matmul(cat, wo)
    }
}

/// Inference-only evaluation of the contextual prompts for all rows of `et`.
pub fn contextual_prompts(et: &Tensor, attn: &ContextualAttention) -> Result<Tensor> {
    let mut g = Graph::inference();
    let e = g.constant(et);
    let out = attn.forward(&mut g, e)?;
    Ok(g.tensor(out))
}

/// Everything needed to re-run inference for one finished task.
#[derive(Clone, Debug, Default)]
pub struct PromptBankEntry {
    pub task: usize,
    /// Position-wise prompt `p_k` (n×d).
    pub prompt: Option<Tensor>,
    /// Snapshot of the contextual prompt `p'_k` (d).
    pub ctx_prompt: Option<Tensor>,
    pub lambda: f32,
    /// Adapter parameters, named `task{k}.adapter.*`.
    pub adapter: ParameterGroup,
    /// Item-attribute embedding table for feature-sequence fusion.
    pub attr_table: Option<Tensor>,
    /// Task-local embedding rows of cold-start items.
    pub cold_rows: Option<Tensor>,
}

impl PromptBankEntry {
    pub fn num_prompt_values(&self) -> usize {
        self.prompt.as_ref().map_or(0, Tensor::numel) + self.ctx_prompt.as_ref().map_or(0, Tensor::numel)
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let k = self.task;
        let mut out = Vec::new();
        if let Some(p) = &self.prompt {
            out.push((format!("task{k}.prompt"), p.clone()));
        }
        if let Some(p) = &self.ctx_prompt {
            out.push((format!("task{k}.ctx_prompt"), p.clone()));
        }
        out.push((format!("task{k}.lambda"), Tensor::scalar(self.lambda)));
        for (n, t) in self.adapter.iter() {
            out.push((n.clone(), t.clone()));
        }
        if let Some(a) = &self.attr_table {
            out.push((format!("task{k}.attr"), a.clone()));
        }
        if let Some(c) = &self.cold_rows {
            out.push((format!("task{k}.cold"), c.clone()));
        }
        out
    }
}

/// Frozen per-task artifacts in completion order.
#[derive(Clone, Debug, Default)]
pub struct PromptBank {
    entries: BTreeMap<usize, PromptBankEntry>,
    order: Vec<usize>,
}

impl PromptBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a finished task. Entries are immutable: re-inserting an
    /// existing task is a contract error.
    pub fn insert(&mut self, mut entry: PromptBankEntry) -> Result<()> {
        ensure!(!self.entries.contains_key(&entry.task), Contract, "task {} already in the prompt bank", entry.task);
        entry.adapter.freeze_all();
        self.order.push(entry.task);
        self.entries.insert(entry.task, entry);
        Ok(())
    }

    pub fn get(&self, task: usize) -> Option<&PromptBankEntry> {
        self.entries.get(&task)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Position-wise prompt of the most recently finished task that has one.
    pub fn latest_prompt(&self) -> Option<&Tensor> {
        self.order.iter().rev().find_map(|k| self.entries[k].prompt.as_ref())
    }

    pub fn num_prompt_values(&self) -> usize {
        self.entries.values().map(PromptBankEntry::num_prompt_values).sum()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.order.iter().flat_map(|k| self.entries[k].tensors()).collect()
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let ts = self.tensors();
        checkpoint::encode(ts.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Rebuilds a bank from checkpoint tensors; entries keep file order.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut bank = PromptBank::new();
        let mut entries: BTreeMap<usize, PromptBankEntry> = BTreeMap::new();
        for (name, t) in tensors {
            let rest = name
                .strip_prefix("task")
                .ok_or_else(|| PclError::Load(format!("unexpected tensor `{name}` in prompt bank")))?;
            let (id, field) = rest
                .split_once('.')
                .ok_or_else(|| PclError::Load(format!("unexpected tensor `{name}` in prompt bank")))?;
            let k: usize = id.parse().map_err(|_| PclError::Load(format!("bad task id in `{name}`")))?;
            if !entries.contains_key(&k) {
                bank.order.push(k);
            }
            let e = entries.entry(k).or_insert_with(|| PromptBankEntry { task: k, ..Default::default() });
            match field {
                "prompt" => e.prompt = Some(t),
                "ctx_prompt" => e.ctx_prompt = Some(t),
                "lambda" => e.lambda = t.data()[0],
                "attr" => e.attr_table = Some(t),
                "cold" => e.cold_rows = Some(t),
                f if f.starts_with("adapter.") => {
                    e.adapter.insert(name.clone(), t);
                    e.adapter.freeze(&name);
                }
                _ => return Err(PclError::Load(format!("unknown prompt-bank field `{name}`"))),
            }
        }
        bank.entries = entries;
        Ok(bank)
    }
}

/// Initial position-wise prompt for `task`.
///
/// In chain mode the first downstream task draws N(0, std²) noise from a
/// per-task seed and later tasks copy the latest finished prompt. Random
/// mode always draws fresh noise.
pub fn init_prompt_for_task(
    task: usize,
    bank: &PromptBank,
    mode: InitMode,
    shape: (usize, usize),
    std: f32,
    seed: u64,
) -> Result<Tensor> {
    ensure!(task != PRETRAIN_TASK, Contract, "the pretraining task has no prompt");
    match (mode, bank.latest_prompt()) {
        (InitMode::Chain, Some(prev)) => {
            ensure!(prev.shape() == [shape.0, shape.1], Dimension, "previous prompt shape {:?}", prev.shape());
            Ok(prev.clone())
        }
        _ => {
            let mut rng = Rng::derived(seed, tag("prompt-init") ^ task as u64);
            Ok(Tensor::randn(&[shape.0, shape.1], std, &mut rng))
        }
    }
}

/// Stored prompt values against the model they ride on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub tasks: usize,
    pub items: usize,
    /// `tasks · (n + 1) · d`: a position prompt and a contextual row per task.
    pub prompt_values: usize,
    /// `items · d`.
    pub table_values: usize,
    /// Backbone parameters outside the item table.
    pub backbone_values: usize,
}

impl MemoryBudget {
    pub const BOUND: f64 = 0.05;

    pub fn new(cfg: &crate::backbone::BackboneConfig, items: usize, tasks: usize) -> Result<Self> {
        let body = crate::backbone::Backbone::new(cfg.clone(), 1, &mut crate::rng::Rng::new(0))?.num_body_parameters();
        Ok(MemoryBudget {
            tasks,
            items,
            prompt_values: tasks * (cfg.n + 1) * cfg.d,
            table_values: items * cfg.d,
            backbone_values: body,
        })
    }

    /// Default model on a Tenrec-sized workload: 16,475 items, 4 tasks.
    pub fn reference() -> Result<Self> {
        Self::new(&crate::backbone::BackboneConfig::default(), 16_475, 4)
    }

    pub fn ratio(&self) -> f64 {
        self.prompt_values as f64 / (self.table_values + self.backbone_values) as f64
    }

    pub fn within_bound(&self) -> bool {
        self.ratio() < Self::BOUND
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{AdapterShape, Metric, TaskDescription, TaskKind};

    fn spec(id: usize, name: &str) -> TaskSpec {
        TaskSpec {
            id,
            kind: TaskKind::Classification,
            metric: Metric::Accuracy,
            labels: 3,
            adapter: AdapterShape::Linear,
            attributes: false,
            description: TaskDescription { name: name.into(), ..Default::default() },
        }
    }

    #[test]
    fn position_fusion_examples() {
        let e1 = Tensor::matrix(4, 2, vec![9.0, 9.0, 8.0, 8.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let p = Tensor::matrix(4, 2, vec![7.0, 7.0, 7.0, 7.0, 0.5, -1.0, 1.0, 0.0]).unwrap();
        let out = fuse::position(&e1, &p, 2).unwrap();
        assert_eq!(out.data(), &[9.0, 9.0, 8.0, 8.0, 1.5, 0.0, 3.0, 2.0]);

        let zero = Tensor::zeros(&[4, 2]);
        assert!(fuse::position(&e1, &zero, 3).unwrap().bit_eq(&e1));
        assert!(fuse::position(&zero, &p, 4).unwrap().bit_eq(&p));
        assert!(matches!(fuse::position(&e1, &p, 5), Err(PclError::Contract(_))));
    }

    #[test]
    fn contextual_fusion_examples() {
        let ek = Tensor::matrix(3, 2, vec![5.0, 5.0, 0.0, 0.0, 2.0, 3.0]).unwrap();
        let ctx = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let out = fuse::contextual(&ek, &ctx, 1.0, 2).unwrap();
        assert_eq!(out.data(), &[5.0, 5.0, 1.0, 0.0, 3.0, 3.0]);
        assert!(fuse::contextual(&ek, &ctx, 0.0, 3).unwrap().bit_eq(&ek));
        assert!(matches!(fuse::contextual(&ek, &ctx, 1.0, 4), Err(PclError::Contract(_))));
    }

    #[test]
    fn feature_fusion_examples() {
        let ek = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let zero_table = Tensor::zeros(&[3, 2]);
        assert!(fuse::features(&ek, &zero_table, &[1, 2, 1]).unwrap().bit_eq(&ek));
        let shift = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.5, -1.0]).unwrap();
        let out = fuse::features(&ek, &shift, &[1, 1, 1]).unwrap();
        assert_eq!(out.data(), &[1.5, 1.0, 3.5, 3.0, 5.5, 5.0]);
        assert!(matches!(fuse::features(&ek, &shift, &[1, 2, 1]), Err(PclError::Index(_))));
    }

    #[test]
    fn hash_provider_is_deterministic_unit_norm() {
        let specs = [spec(2, "age"), spec(3, "age"), spec(4, "genre")];
        let e = embed_task_descriptions(&specs, &ProviderConfig::Hash, 16).unwrap();
        assert_eq!(e.row(2).unwrap(), e.row(3).unwrap());
        assert_ne!(e.row(2).unwrap(), e.row(4).unwrap());
        let norm: f32 = e.row(4).unwrap().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn shared_words_raise_hash_similarity() {
        let cos = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        let a = hash_embedding("dominant category of the last 3 interactions", 64);
        let b = hash_embedding("category of the latest interaction", 64);
        let c = hash_embedding("age bracket of the user", 64);
        assert!(cos(&a, &b) > cos(&a, &c) + 0.2);
        assert_eq!(hash_embedding("Same words", 8), hash_embedding("same, words", 8));
    }

    #[test]
    fn zero_provider_gives_zero_prompts() {
        let specs = [spec(1, "a"), spec(2, "b")];
        let e = embed_task_descriptions(&specs, &ProviderConfig::Zero, 8).unwrap();
        let attn = ContextualAttention::new("ctx", 8, 2, &mut Rng::new(1)).unwrap();
        let p = contextual_prompts(&e.matrix(&[1, 2]).unwrap(), &attn).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn file_provider_round_trip_and_missing_task() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.pclt");
        let specs: Vec<TaskSpec> = (1..=4).map(|k| spec(k, &format!("t{k}"))).collect();
        let src = embed_task_descriptions(&specs, &ProviderConfig::Random { seed: 3 }, 16).unwrap();
        src.save(&path).unwrap();
        let back = embed_task_descriptions(&specs, &ProviderConfig::File { path: path.clone() }, 16).unwrap();
        let ids = [1, 2, 3, 4];
        assert!(back.matrix(&ids).unwrap().bit_eq(&src.matrix(&ids).unwrap()));
        assert_eq!(back.provider, ProviderTag::File);

        let more = [spec(5, "t5")];
        assert!(matches!(embed_task_descriptions(&more, &ProviderConfig::File { path }, 16), Err(PclError::Load(_))));
    }

    #[test]
    fn contextual_attention_config_error() {
        assert!(matches!(ContextualAttention::new("c", 6, 4, &mut Rng::new(0)), Err(PclError::Config(_))));
    }

    #[test]
    fn single_task_attention_is_value_projection() {
        let mut rng = Rng::new(5);
        let attn = ContextualAttention::new("c", 4, 2, &mut rng).unwrap();
        let et = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let p = contextual_prompts(&et, &attn).unwrap();
        // (E W^V_1 ‖ E W^V_2) W^O
        let mut g = Graph::inference();
        let e = g.constant(&et);
        let v0 = g.bind(attn.params(), "c.wv0").unwrap();
        let v1 = g.bind(attn.params(), "c.wv1").unwrap();
        let h0 = g.matmul(e, v0).unwrap();
        let h1 = g.matmul(e, v1).unwrap();
        let cat = g.concat_cols(&[h0, h1]).unwrap();
        let wo = g.bind(attn.params(), "c.wo").unwrap();
        let want = g.matmul(cat, wo).unwrap();
        for (a, b) in p.data().iter().zip(g.value(want)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_rows_give_identical_prompts() {
        let mut rng = Rng::new(8);
        let attn = ContextualAttention::new("c", 4, 2, &mut rng).unwrap();
        let r = rng.normal_vec(4, 1.0);
        let other = rng.normal_vec(4, 1.0);
        let et = Tensor::from_rows(&[r.clone(), other, r]).unwrap();
        let p = contextual_prompts(&et, &attn).unwrap();
        assert_eq!(p.row(0), p.row(2));
    }

    #[test]
    fn prompt_init_chain_random_and_pretrain() {
        let mut bank = PromptBank::new();
        assert!(matches!(init_prompt_for_task(1, &bank, InitMode::Chain, (4, 2), 0.02, 7), Err(PclError::Contract(_))));
        let p2 = init_prompt_for_task(2, &bank, InitMode::Chain, (4, 2), 0.02, 7).unwrap();
        let again = init_prompt_for_task(2, &bank, InitMode::Chain, (4, 2), 0.02, 7).unwrap();
        assert!(p2.bit_eq(&again));
        bank.insert(PromptBankEntry { task: 2, prompt: Some(p2.clone()), ..Default::default() }).unwrap();
        let p3 = init_prompt_for_task(3, &bank, InitMode::Chain, (4, 2), 0.02, 7).unwrap();
        assert!(p3.bit_eq(&p2));
        let r3 = init_prompt_for_task(3, &bank, InitMode::Random, (4, 2), 0.02, 7).unwrap();
        assert!(!r3.bit_eq(&p2));
    }

    #[test]
    fn bank_entries_are_immutable_and_round_trip() {
        let mut bank = PromptBank::new();
        let mut adapter = ParameterGroup::new();
        adapter.insert("task3.adapter.w0", Tensor::zeros(&[2, 3]));
        let entry = PromptBankEntry {
            task: 3,
            prompt: Some(Tensor::zeros(&[4, 2])),
            ctx_prompt: Some(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
            lambda: 0.1,
            adapter,
            attr_table: None,
            cold_rows: None,
        };
        bank.insert(entry.clone()).unwrap();
        assert!(bank.insert(entry).is_err());
        let bytes = bank.checkpoint_bytes().unwrap();
        let back = PromptBank::from_tensors(checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.checkpoint_bytes().unwrap(), bytes);
        assert!(back.get(3).unwrap().adapter.is_frozen("task3.adapter.w0"));
    }

    #[test]
    fn memory_budget_counts() {
        let cfg = crate::backbone::BackboneConfig { d: 4, n: 6, blocks: 1, heads: 2, dropout: 0.0 };
        let m = MemoryBudget::new(&cfg, 10, 3).unwrap();
        assert_eq!(m.prompt_values, 84);
        assert_eq!(m.table_values, 40);
        // pos 24, q/k/v 48, wo 16, two norms 16, ffn 40, final norm 8
        assert_eq!(m.backbone_values, 152);
        assert!(MemoryBudget::reference().unwrap().within_bound());
    }
}
