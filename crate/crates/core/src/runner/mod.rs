//! The continual task stream: pretrain the next-item task, freeze, then tune
//! each downstream task under a freeze policy.

pub mod experiments;
mod head;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::{Policy, RunConfig};
use crate::data::{fraction_split, leave_one_out, Dataset};
use crate::error::{ensure, PclError, Result};
use crate::metrics::MetricRecord;
use crate::prompt::{
    embed_task_descriptions, init_prompt_for_task, ContextualAttention, CtxScope, InitMode, PromptBank,
    TaskDescriptionEmbedding,
};
use crate::rng::{derive_seed, tag, Rng};
use crate::task::{TaskKind, TaskSpec, PRETRAIN_TASK};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};

use head::{evaluate, pname, Head, LiveCtx};

pub use experiments::*;

/// One supervised instance: `label` is a class index or a target item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub input: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Leave-one-out examples for the pretraining task; seeded user split over
/// full sequences for downstream tasks.
pub fn task_data(ds: &Dataset, task: usize, cfg: &RunConfig) -> Result<TaskData> {
    if task == PRETRAIN_TASK {
        let loo = leave_one_out(&ds.sequences, cfg.split.strict)?;
        let conv = |v: Vec<crate::data::LinkExample>| {
            v.into_iter().map(|e| Example { user: e.user, input: e.input, label: e.target }).collect()
        };
        return Ok(TaskData { train: Vec::new(), val: conv(loo.val), test: conv(loo.test) });
    }
    let labels = ds.labels.get(&task).ok_or_else(|| PclError::Contract(format!("unknown task {task}")))?;
    let split = fraction_split(ds.num_users(), cfg.split.train, cfg.split.val, cfg.seed, task)?;
    let ex = |users: &[usize]| -> Vec<Example> {
        users.iter().map(|&u| Example { user: u, input: ds.sequences[u].clone(), label: labels[u] }).collect()
    };
    Ok(TaskData { train: ex(&split.train), val: ex(&split.val), test: ex(&split.test) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub order_index: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Test metrics recorded when the task finished.
    pub metrics: Vec<MetricRecord>,
    pub prompt_params: usize,
    pub curve: Vec<EpochLog>,
}

impl TaskRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.value)
    }
}

/// Everything needed to re-run inference on any completed task.
#[derive(Clone, Debug)]
pub struct ContinualState {
    pub config: RunConfig,
    /// The shared backbone. Frozen after pretraining except under `sinmo`.
    pub backbone: Backbone,
    pub bank: PromptBank,
    /// Per-task backbones of the `fineall` and `sasrec-per-task` policies.
    pub private: BTreeMap<usize, Backbone>,
    pub shared_ctx: Option<ContextualAttention>,
    pub descriptions: TaskDescriptionEmbedding,
    pub history: Vec<TaskRecord>,
    /// Items hidden from pretraining whose rows are learned per task.
    pub cold_items: Vec<usize>,
}

impl ContinualState {
    pub fn record(&self, task: usize) -> Option<&TaskRecord> {
        self.history.iter().find(|r| r.task == task)
    }

    pub fn completed(&self) -> Vec<usize> {
        self.history.iter().map(|r| r.task).collect()
    }

    /// Distinct backbones needed to serve every completed task.
    pub fn backbone_count(&self) -> usize {
        1 + self.private.len()
    }

    fn head_for(&self, task: usize) -> Result<Head> {
        let window = self.config.prompt.window;
        if task == PRETRAIN_TASK {
            return Ok(Head::empty(task, window));
        }
        let e = self.bank.get(task).ok_or_else(|| PclError::Contract(format!("task {task} has not been completed")))?;
        Head::from_entry(e, window, &self.cold_items)
    }

    fn backbone_for(&self, task: usize) -> &Backbone {
        self.private.get(&task).unwrap_or(&self.backbone)
    }

    /// Test metrics of a completed task against the current state.
    pub fn evaluate(&self, ds: &Dataset, task: usize, order_index: usize) -> Result<Vec<MetricRecord>> {
        let spec = ds.task(task).ok_or_else(|| PclError::Contract(format!("unknown task {task}")))?;
        let head = self.head_for(task)?;
        let data = task_data(ds, task, &self.config)?;
        let s = evaluate(
            self.backbone_for(task),
            &head,
            ds,
            spec,
            &data.test,
            self.config.eval.protocol,
            &self.config.eval.ks,
        )?;
        Ok(s.rows
            .into_iter()
            .map(|(metric, protocol, value)| MetricRecord { task, metric, protocol, value, order_index })
            .collect())
    }

    /// Prompted behavior latent of every user (full sequence) under `task`.
    pub fn user_latents(&self, ds: &Dataset, task: usize) -> Result<Vec<Vec<f32>>> {
        ensure!(self.record(task).is_some(), Contract, "task {task} has not been completed");
        let head = self.head_for(task)?;
        let ex: Vec<Example> =
            ds.sequences.iter().enumerate().map(|(u, s)| Example { user: u, input: s.clone(), label: 0 }).collect();
        Ok(head.infer(self.backbone_for(task), ds, &ex)?.0)
    }

    /// Uses other description embeddings for tasks not yet trained.
    pub fn set_descriptions(&mut self, e: TaskDescriptionEmbedding) {
        self.descriptions = e;
    }
}

fn best_improved(val: f64, best: f64) -> bool {
    val > best
}

/// Trains the backbone on next-item prediction and freezes it.
pub fn pretrain(ds: &Dataset, cfg: &RunConfig) -> Result<ContinualState> {
    pretrain_with_cold(ds, cfg, Vec::new())
}

/// As [`pretrain`]; the rows of `cold_items` are zeroed afterwards.
pub fn pretrain_with_cold(ds: &Dataset, cfg: &RunConfig, cold_items: Vec<usize>) -> Result<ContinualState> {
    cfg.validate()?;
    ds.validate()?;
    let seed1 = derive_seed(cfg.seed, PRETRAIN_TASK as u64);
    let mut bb = Backbone::new(cfg.backbone.clone(), ds.num_items(), &mut Rng::derived(cfg.seed, tag("backbone")))?;
    let loo = leave_one_out(&ds.sequences, cfg.split.strict)?;
    let data = task_data(ds, PRETRAIN_TASK, cfg)?;
    let spec = ds.task(PRETRAIN_TASK).cloned().unwrap_or_else(TaskSpec::pretrain);
    let tc = &cfg.pretrain;
    let mut adam = AdamState::new(AdamConfig { lr: tc.lr_for(PRETRAIN_TASK), ..Default::default() });
    let mut shuffle = Rng::derived(seed1, tag("shuffle"));
    let mut train_rng = Rng::derived(seed1, tag("train"));
    let empty = Head::empty(PRETRAIN_TASK, cfg.prompt.window);
    let mut order: Vec<usize> = (0..loo.train.len()).collect();
    let (mut best, mut best_epoch, mut best_bb) = (f64::NEG_INFINITY, 0, bb.clone());
    let mut curve = Vec::new();
    let mut stale = 0;
    for epoch in 1..=tc.epochs {
        shuffle.shuffle(&mut order);
        let (mut total, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(tc.batch) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| loo.train[i].1.as_slice()).collect();
            total += bb.pretrain_step(&seqs, tc.negatives, &mut adam, &mut train_rng)? as f64;
            batches += 1;
        }
        let val = evaluate(&bb, &empty, ds, &spec, &data.val, cfg.eval.protocol, &cfg.eval.ks)?.primary;
        curve.push(EpochLog { epoch, loss: total / batches.max(1) as f64, val });
        if best_improved(val, best) {
            (best, best_epoch, best_bb) = (val, epoch, bb.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let epochs_run = curve.len();
    let mut bb = best_bb;
    if !cold_items.is_empty() {
        let d = cfg.backbone.d;
        let table = bb.params_mut().get_mut("item_table").expect("item table");
        for &i in &cold_items {
            ensure!((1..=ds.num_items()).contains(&i), Index, "cold item {i} outside the catalog");
            table.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    bb.freeze();
    let descriptions = embed_task_descriptions(&ds.tasks, &cfg.prompt.provider, cfg.backbone.d)?;
    let mut state = ContinualState {
        config: cfg.clone(),
        backbone: bb,
        bank: PromptBank::new(),
        private: BTreeMap::new(),
        shared_ctx: None,
        descriptions,
        history: Vec::new(),
        cold_items,
    };
    let metrics = state.evaluate(ds, PRETRAIN_TASK, 0)?;
    state.history.push(TaskRecord {
        task: PRETRAIN_TASK,
        order_index: 0,
        seed: seed1,
        epochs_run,
        best_epoch,
        best_val: best,
        metrics,
        prompt_params: 0,
        curve,
    });
    Ok(state)
}

/// Trains downstream task `task` under the state's policy and stores its
/// artifacts. Returns the new history record.
pub fn run_task(state: &mut ContinualState, ds: &Dataset, task: usize, order_index: usize) -> Result<TaskRecord> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let spec = ds.task(task).ok_or_else(|| PclError::Config(format!("unknown task {task}")))?.clone();
    ensure!(!spec.is_pretrain(), Contract, "the pretraining task is trained by `pretrain`");
    ensure!(state.record(PRETRAIN_TASK).is_some(), Contract, "pretraining has not run");
    ensure!(state.record(task).is_none(), Contract, "task {task} is already completed");
    let fp = cfg.policy.preset();
    let use_pos = fp.prompts && cfg.prompt.position;
    let use_ctx = fp.prompts && cfg.prompt.contextual;
    let cold = !state.cold_items.is_empty();
    if spec.kind == TaskKind::Link && fp.backbone_frozen && !use_pos && !use_ctx && !cold {
        return Err(PclError::Config(format!(
            "policy {} trains nothing on link task {task}: it has no adapter and no prompts",
            cfg.policy
        )));
    }
    let (d, n) = (cfg.backbone.d, cfg.backbone.n);
    let seed_k = derive_seed(cfg.seed, task as u64);

    let mut bb = match cfg.policy {
        Policy::Pcl | Policy::AdapterOnly => state.backbone.clone(),
        Policy::Sinmo | Policy::Fineall => state.backbone.unfrozen_clone(),
        Policy::SasrecPerTask => {
            let mut fresh =
                Backbone::new(cfg.backbone.clone(), ds.num_items(), &mut Rng::derived(seed_k, tag("backbone")))?;
            if cold {
                let table = fresh.params_mut().get_mut("item_table").expect("item table");
                for &i in &state.cold_items {
                    table.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
                }
            }
            fresh
        }
    };
    let train_backbone = !fp.backbone_frozen;

    let mut head = Head::empty(task, cfg.prompt.window);
    head.lambda = if use_ctx { cfg.prompt.lambda } else { 0.0 };
    if use_pos {
        let p = init_prompt_for_task(task, &state.bank, cfg.prompt.init, (n, d), cfg.prompt.init_std, cfg.seed)?;
        head.params.insert(pname(task, "prompt"), p);
    }
    if use_ctx {
        let attn = if cfg.prompt.ctx_shared {
            match &state.shared_ctx {
                Some(a) => a.clone(),
                None => {
                    ContextualAttention::new("ctx", d, cfg.ctx_heads, &mut Rng::derived(cfg.seed, tag("ctx-shared")))?
                }
            }
        } else {
            ContextualAttention::new(&pname(task, "ctx"), d, cfg.ctx_heads, &mut Rng::derived(seed_k, tag("ctx")))?
        };
        let scope: Vec<usize> = match cfg.prompt.ctx_scope {
            CtxScope::All => ds.tasks.iter().map(|t| t.id).collect(),
            CtxScope::Visible => {
                let mut v = state.completed();
                v.push(task);
                v
            }
        };
        let row = scope.iter().position(|&t| t == task).expect("task in scope");
        let et = state.descriptions.matrix(&scope)?;
        for (name, t) in attn.params().iter() {
            head.params.insert(name.clone(), t.clone());
        }
        head.live_ctx = Some(LiveCtx { attn, et, row });
    }
    if fp.adapter {
        head.add_adapter(&spec.adapter, d, spec.labels, &mut Rng::derived(seed_k, tag("adapter")));
    }
    if spec.attributes {
        let mut attr = Tensor::randn(&[ds.num_attrs + 1, d], 0.02, &mut Rng::derived(seed_k, tag("attr")));
        attr.data_mut()[..d].iter_mut().for_each(|x| *x = 0.0);
        head.params.insert(pname(task, "attr"), attr);
    }
    if cold {
        head.params.insert(pname(task, "cold"), Tensor::zeros(&[state.cold_items.len(), d]));
        head.cold_ids = state.cold_items.clone();
    }
    ensure!(
        !head.params.is_empty() || train_backbone,
        Config,
        "policy {} has nothing to train on task {task}",
        cfg.policy
    );

    let data = task_data(ds, task, &cfg)?;
    ensure!(!data.train.is_empty() && !data.val.is_empty(), Data, "task {task} has no training or validation users");
    let tc = &cfg.tune;
    let adam_cfg = AdamConfig { lr: tc.lr_for(task), ..Default::default() };
    let (mut adam_h, mut adam_b) = (AdamState::new(adam_cfg), AdamState::new(adam_cfg));
    let mut shuffle = Rng::derived(seed_k, tag("shuffle"));
    let mut neg_rng = Rng::derived(seed_k, tag("negatives"));
    let mut drop_rng = Rng::derived(seed_k, tag("dropout"));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, head.params.clone(), None::<Backbone>);
    let mut curve = Vec::new();
    let mut stale = 0;
    for epoch in 1..=tc.epochs {
        shuffle.shuffle(&mut order);
        let (mut total, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(tc.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut g = Graph::new();
            let loss = head.loss(&mut g, &bb, ds, &spec, &batch, tc.negatives, &mut neg_rng, &mut drop_rng)?;
            total += g.scalar(loss) as f64;
            batches += 1;
            let grads = g.backward(loss)?;
            head.params.accumulate(&grads);
            adam_h.step(&mut head.params)?;
            if train_backbone {
                bb.params_mut().accumulate(&grads);
                adam_b.step(bb.params_mut())?;
            }
        }
        let val = evaluate(&bb, &head, ds, &spec, &data.val, cfg.eval.protocol, &cfg.eval.ks)?.primary;
        curve.push(EpochLog { epoch, loss: total / batches.max(1) as f64, val });
        if best_improved(val, best.0) {
            best = (val, epoch, head.params.clone(), train_backbone.then(|| bb.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let epochs_run = curve.len();
    let (best_val, best_epoch, params, best_bb) = best;
    head.params = params;
    if let Some(b) = best_bb {
        bb = b;
    }
    if let Some(weights) = head.finalize()? {
        if cfg.prompt.ctx_shared {
            let mut attn = ContextualAttention::from_params("ctx", cfg.ctx_heads, weights)?;
            attn.params_mut().zero_grad();
            state.shared_ctx = Some(attn);
        }
    }
    let prompt_params = head.prompt_values();
    state.bank.insert(head.to_entry())?;
    match cfg.policy {
        Policy::Sinmo => {
            bb.freeze();
            state.backbone = bb;
        }
        Policy::Fineall | Policy::SasrecPerTask => {
            bb.freeze();
            state.private.insert(task, bb);
        }
        Policy::Pcl | Policy::AdapterOnly => {}
    }
    let metrics = state.evaluate(ds, task, order_index)?;
    let rec =
        TaskRecord { task, order_index, seed: seed_k, epochs_run, best_epoch, best_val, metrics, prompt_params, curve };
    state.history.push(rec.clone());
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub task: usize,
    pub metric: String,
    pub protocol: String,
    pub recorded: f64,
    pub current: f64,
    pub delta: f64,
}

/// Re-evaluates every completed task and compares with the value recorded
/// at its completion. Empty until two tasks are done.
pub fn forgetting_audit(state: &ContinualState, ds: &Dataset) -> Result<Vec<AuditRow>> {
    if state.history.len() < 2 {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for rec in &state.history {
        let now = state.evaluate(ds, rec.task, rec.order_index)?;
        for (old, new) in rec.metrics.iter().zip(&now) {
            rows.push(AuditRow {
                task: rec.task,
                metric: old.metric.clone(),
                protocol: old.protocol.clone(),
                recorded: old.value,
                current: new.value,
                delta: new.value - old.value,
            });
        }
    }
    Ok(rows)
}

/// Checks a task order: a permutation of the downstream ids, optionally
/// preceded by task 1. Returns the downstream part.
pub fn validate_order(ds: &Dataset, order: &[usize]) -> Result<Vec<usize>> {
    if let Some(pos) = order.iter().position(|&t| t == PRETRAIN_TASK) {
        ensure!(pos == 0, Contract, "task 1 must come first, found at position {}", pos + 1);
    }
    let rest: Vec<usize> = order.iter().copied().filter(|&t| t != PRETRAIN_TASK).collect();
    let known = ds.downstream_ids();
    for t in &rest {
        ensure!(known.contains(t), Config, "order names unknown task {t}");
    }
    let mut sorted = rest.clone();
    sorted.sort_unstable();
    sorted.dedup();
    ensure!(
        sorted.len() == rest.len() && sorted == known,
        Config,
        "order {order:?} is not a permutation of the downstream tasks {known:?}"
    );
    Ok(rest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub policy: Policy,
    pub init: InitMode,
    pub order: Vec<usize>,
    pub tasks: Vec<TaskRecord>,
    pub audit: Vec<AuditRow>,
    pub backbone_checkpoints: usize,
    pub prompt_params: usize,
    /// Left out of both renderings so that reports of identical runs are
    /// byte-identical.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

impl SequenceReport {
    pub fn record(&self, task: usize) -> Option<&TaskRecord> {
        self.tasks.iter().find(|r| r.task == task)
    }

    pub fn metrics(&self) -> Vec<MetricRecord> {
        self.tasks.iter().flat_map(|r| r.metrics.iter().cloned()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let order: Vec<String> = self.order.iter().map(usize::to_string).collect();
        writeln!(
            s,
            "policy {}  init {}  order {}",
            self.policy,
            format!("{:?}", self.init).to_lowercase(),
            order.join(",")
        )
        .unwrap();
        writeln!(
            s,
            "{:<6}{:<8}{:<8}{:>10}{:>8}{:>8}{:>10}",
            "task", "metric", "proto", "value", "epochs", "best", "prompt#"
        )
        .unwrap();
        for r in &self.tasks {
            for m in &r.metrics {
                writeln!(
                    s,
                    "{:<6}{:<8}{:<8}{:>10.4}{:>8}{:>8}{:>10}",
                    r.task, m.metric, m.protocol, m.value, r.epochs_run, r.best_epoch, r.prompt_params
                )
                .unwrap();
            }
        }
        let worst = self.audit.iter().map(|a| a.delta).fold(0.0f64, f64::min);
        writeln!(
            s,
            "backbones {}  prompt values {}  min audit delta {worst}",
            self.backbone_checkpoints, self.prompt_params
        )
        .unwrap();
        s
    }
}

/// Runs the downstream tasks of `order` on a pretrained state.
pub fn run_sequence(state: &mut ContinualState, ds: &Dataset, order: &[usize]) -> Result<SequenceReport> {
    let start = Instant::now();
    let order = validate_order(ds, order)?;
    for (i, &k) in order.iter().enumerate() {
        run_task(state, ds, k, i + 1)?;
    }
    let audit = forgetting_audit(state, ds)?;
    Ok(SequenceReport {
        policy: state.config.policy,
        init: state.config.prompt.init,
        order,
        tasks: state.history.clone(),
        audit,
        backbone_checkpoints: state.backbone_count(),
        prompt_params: state.bank.num_prompt_values(),
        wall_clock_ms: start.elapsed().as_millis(),
    })
}

/// Recomputes description embeddings for a state (used by ablations).
pub fn with_descriptions(
    mut state: ContinualState,
    ds: &Dataset,
    provider: &crate::prompt::ProviderConfig,
) -> Result<ContinualState> {
    let e = embed_task_descriptions(&ds.tasks, provider, state.config.backbone.d)?;
    state.config.prompt.provider = provider.clone();
    state.set_descriptions(e);
    Ok(state)
}
