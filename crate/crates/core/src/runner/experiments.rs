//! Experiment harnesses built on the task stream: order permutations,
//! ablations, cold-start curves and user representation export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_sequence, run_task, with_descriptions, ContinualState, EpochLog, SequenceReport};
use crate::data::{Dataset, UserSplit};
use crate::error::{ensure, PclError, Result};
use crate::metrics;
use crate::prompt::ProviderConfig;
use crate::rng::{derive_seed, tag, Rng};
use crate::tensor::{AdamConfig, AdamState, Graph, ParameterGroup, Tensor};

/// Every permutation of `ids` in lexicographic order.
pub fn permutations(ids: &[usize]) -> Vec<Vec<usize>> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    let mut out = vec![v.clone()];
    while let Some(i) = (0..v.len().saturating_sub(1)).rev().find(|&i| v[i] < v[i + 1]) {
        let j = (i + 1..v.len()).rev().find(|&j| v[j] > v[i]).unwrap();
        v.swap(i, j);
        v[i + 1..].reverse();
        out.push(v.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub task: usize,
    pub metric: String,
    pub best: f64,
    pub worst: f64,
    /// `(best - worst) / best`, 0 when best is 0.
    pub relative: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub runs: Vec<SequenceReport>,
    pub spread: Vec<SpreadRow>,
}

/// Best-to-worst spread of every (task, metric) across runs.
pub fn spread_table(runs: &[SequenceReport]) -> Vec<SpreadRow> {
    let mut by: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for r in runs {
        for m in r.metrics() {
            by.entry((m.task, m.metric.clone())).or_default().push(m.value);
        }
    }
    by.into_iter()
        .map(|((task, metric), values)| {
            let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
            let relative = if best > 0.0 { (best - worst) / best } else { 0.0 };
            SpreadRow { task, metric, best, worst, relative, values }
        })
        .collect()
}

impl OrderReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<6}{:<8}{:>6}{:>10}{:>10}{:>10}", "task", "metric", "runs", "best", "worst", "spread").unwrap();
        for r in &self.spread {
            writeln!(
                s,
                "{:<6}{:<8}{:>6}{:>10.4}{:>10.4}{:>9.2}%",
                r.task,
                r.metric,
                r.values.len(),
                r.best,
                r.worst,
                100.0 * r.relative
            )
            .unwrap();
        }
        s
    }
}

/// Runs each order from a copy of the same pretrained state.
pub fn run_orders(pretrained: &ContinualState, ds: &Dataset, orders: &[Vec<usize>]) -> Result<OrderReport> {
    let mut runs = Vec::with_capacity(orders.len());
    for o in orders {
        let mut st = pretrained.clone();
        runs.push(run_sequence(&mut st, ds, o)?);
    }
    let spread = spread_table(&runs);
    Ok(OrderReport { runs, spread })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No contextual prompts: λ = 0 and the attention is never built.
    NoCtx,
    /// Description embeddings replaced by seeded random rows.
    NoPlm,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoCtx, Ablation::NoPlm];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCtx => "no_ctx",
            Ablation::NoPlm => "no_plm",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Ablation>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',')
            .map(|v| {
                Self::ALL
                    .into_iter()
                    .find(|a| a.name() == v.trim())
                    .ok_or_else(|| PclError::Config(format!("unknown ablation `{v}` (full, no_ctx, no_plm, all)")))
            })
            .collect()
    }

    /// The pretrained state adjusted for this variant.
    pub fn apply(self, pretrained: &ContinualState, ds: &Dataset) -> Result<ContinualState> {
        let mut st = pretrained.clone();
        match self {
            Ablation::Full => Ok(st),
            Ablation::NoCtx => {
                st.config.prompt.contextual = false;
                st.config.prompt.lambda = 0.0;
                Ok(st)
            }
            Ablation::NoPlm => {
                let seed = derive_seed(st.config.seed, tag("no-plm"));
                with_descriptions(st, ds, &ProviderConfig::Random { seed })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub task: usize,
    pub metric: String,
    pub protocol: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub order: Vec<usize>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<(Ablation, SequenceReport)>,
}

impl AblationReport {
    pub fn from_runs(runs: Vec<(Ablation, SequenceReport)>) -> Self {
        let mut rows = Vec::new();
        for (v, rep) in &runs {
            for m in rep.metrics() {
                rows.push(AblationRow {
                    variant: *v,
                    task: m.task,
                    metric: m.metric,
                    protocol: m.protocol,
                    value: m.value,
                });
            }
        }
        let order = runs.first().map(|r| r.1.order.clone()).unwrap_or_default();
        AblationReport { order, rows, runs }
    }

    pub fn value(&self, variant: Ablation, task: usize, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.task == task && r.metric == metric).map(|r| r.value)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let variants: Vec<Ablation> = self.runs.iter().map(|r| r.0).collect();
        write!(s, "{:<6}{:<8}", "task", "metric").unwrap();
        for v in &variants {
            write!(s, "{:>10}", v.name()).unwrap();
        }
        s.push('\n');
        let mut keys: Vec<(usize, String)> = self.rows.iter().map(|r| (r.task, r.metric.clone())).collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        for (task, metric) in keys {
            write!(s, "{task:<6}{metric:<8}").unwrap();
            for v in &variants {
                match self.value(*v, task, &metric) {
                    Some(x) => write!(s, "{x:>10.4}").unwrap(),
                    None => write!(s, "{:>10}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn run_ablation(
    pretrained: &ContinualState,
    ds: &Dataset,
    order: &[usize],
    variants: &[Ablation],
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &v in variants {
        let mut st = v.apply(pretrained, ds)?;
        runs.push((v, run_sequence(&mut st, ds, order)?));
    }
    Ok(AblationReport::from_runs(runs))
}

/// Removes a seeded `fraction` of items from every sequence. Returns the
/// masked dataset and the sorted cold items. Users left without items are
/// a data error when `strict`, otherwise dropped.
pub fn mask_cold_start(ds: &Dataset, fraction: f64, seed: u64, strict: bool) -> Result<(Dataset, Vec<usize>)> {
    ensure!((0.0..1.0).contains(&fraction), Config, "cold-start fraction {fraction} outside [0, 1)");
    if fraction == 0.0 {
        return Ok((ds.clone(), Vec::new()));
    }
    let mut items: Vec<usize> = (1..=ds.num_items()).collect();
    Rng::derived(seed, tag("cold-start")).shuffle(&mut items);
    let count = (fraction * ds.num_items() as f64).round() as usize;
    let mut cold: Vec<usize> = items[..count].to_vec();
    cold.sort_unstable();
    let is_cold = {
        let mut v = vec![false; ds.num_items() + 1];
        cold.iter().for_each(|&i| v[i] = true);
        v
    };
    let mut keep = Vec::with_capacity(ds.num_users());
    let mut masked = ds.clone();
    for (u, s) in ds.sequences.iter().enumerate() {
        let m: Vec<usize> = s.iter().copied().filter(|&i| !is_cold[i]).collect();
        if m.is_empty() {
            ensure!(!strict, Data, "user `{}` has only cold items", ds.users[u]);
            continue;
        }
        masked.sequences[u] = m;
        keep.push(u);
    }
    let masked = if keep.len() == ds.num_users() { masked } else { masked.select_users(&keep) };
    Ok((masked, cold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub task: usize,
    pub fraction: f64,
    pub cold_items: usize,
    pub with_prompts: Vec<EpochLog>,
    pub without_prompts: Vec<EpochLog>,
    /// Best validation value of the run without prompts.
    pub target: f64,
    /// First epoch at which each run reaches `target`.
    pub epochs_with: Option<usize>,
    pub epochs_without: Option<usize>,
    /// Test metrics of the run with prompts.
    pub metrics: Vec<metrics::MetricRecord>,
}

impl ColdStartReport {
    pub fn prompts_no_slower(&self) -> bool {
        matches!((self.epochs_with, self.epochs_without), (Some(a), Some(b)) if a <= b)
    }

    /// `variant,epoch,loss,val` rows.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("variant,epoch,loss,val\n");
        for (name, c) in [("prompts", &self.with_prompts), ("no_prompts", &self.without_prompts)] {
            for e in c {
                writeln!(s, "{name},{},{},{}", e.epoch, e.loss, e.val).unwrap();
            }
        }
        s
    }
}

fn first_reaching(curve: &[EpochLog], target: f64) -> Option<usize> {
    curve.iter().find(|e| e.val >= target).map(|e| e.epoch)
}

/// Tunes `task` on a pretrained cold-start state twice: prompts with cold
/// rows, and cold rows (plus adapter) alone.
pub fn cold_start_curves(
    pretrained: &ContinualState,
    ds: &Dataset,
    task: usize,
    fraction: f64,
) -> Result<ColdStartReport> {
    let mut with = pretrained.clone();
    with.config.policy = crate::config::Policy::Pcl;
    let mut without = with.clone();
    without.config.prompt.position = false;
    without.config.prompt.contextual = false;
    let a = run_task(&mut with, ds, task, 1)?;
    let b = run_task(&mut without, ds, task, 1)?;
    let target = b.curve.iter().map(|e| e.val).fold(f64::NEG_INFINITY, f64::max);
    Ok(ColdStartReport {
        task,
        fraction,
        cold_items: pretrained.cold_items.len(),
        epochs_with: first_reaching(&a.curve, target),
        epochs_without: first_reaching(&b.curve, target),
        with_prompts: a.curve,
        without_prompts: b.curve,
        target,
        metrics: a.metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub tasks: Vec<usize>,
    pub d: usize,
    pub width: usize,
    /// Row order of the feature matrix.
    pub users: Vec<String>,
}

/// `|U| × (d·|tasks|)` matrix of prompted behavior latents, one block of
/// `d` columns per listed task.
pub fn export_user_representations(
    state: &ContinualState,
    ds: &Dataset,
    tasks: &[usize],
) -> Result<(Tensor, ExportManifest)> {
    ensure!(!tasks.is_empty(), Contract, "no tasks to export");
    let d = state.config.backbone.d;
    let mut blocks = Vec::with_capacity(tasks.len());
    for &t in tasks {
        ensure!(state.record(t).is_some(), Contract, "task {t} is unknown or not completed");
        blocks.push(state.user_latents(ds, t)?);
    }
    let width = d * tasks.len();
    let mut data = Vec::with_capacity(ds.num_users() * width);
    for u in 0..ds.num_users() {
        for b in &blocks {
            data.extend_from_slice(&b[u]);
        }
    }
    let m = Tensor::matrix(ds.num_users(), width, data)?;
    Ok((m, ExportManifest { tasks: tasks.to_vec(), d, width, users: ds.users.clone() }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub width: usize,
    pub val_curve: Vec<f64>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub test_acc: f64,
    /// First epoch reaching 99% of the best validation accuracy.
    pub convergence_epoch: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

/// Trains a one-hidden-layer MLP on fixed features and reports test
/// accuracy at the best validation epoch.
pub fn probe(
    name: &str,
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    split: &UserSplit,
    pc: ProbeConfig,
) -> Result<ProbeResult> {
    let (u, w) = (features.rows(), features.cols());
    ensure!(labels.len() == u, Dimension, "{} labels for {u} feature rows", labels.len());
    let mut rng = Rng::derived(pc.seed, tag("probe"));
    let mut p = ParameterGroup::new();
    p.insert("w0", Tensor::randn(&[w, pc.hidden], (2.0 / (w + pc.hidden) as f32).sqrt(), &mut rng));
    p.insert("b0", Tensor::zeros(&[pc.hidden]));
    p.insert("w1", Tensor::randn(&[pc.hidden, classes], (2.0 / (pc.hidden + classes) as f32).sqrt(), &mut rng));
    p.insert("b1", Tensor::zeros(&[classes]));
    let forward = |g: &mut Graph, p: &ParameterGroup, rows: &[usize]| -> Result<_> {
        let data: Vec<f32> = rows.iter().flat_map(|&r| features.row(r).iter().copied()).collect();
        let x = g.constant_data(vec![rows.len(), w], data)?;
        let (w0, b0, w1, b1) = (g.bind(p, "w0")?, g.bind(p, "b0")?, g.bind(p, "w1")?, g.bind(p, "b1")?);
        let h = g.matmul(x, w0)?;
        let h = g.add_bias(h, b0)?;
        let h = g.relu(h)?;
        let y = g.matmul(h, w1)?;
        g.add_bias(y, b1)
    };
    let acc = |p: &ParameterGroup, rows: &[usize]| -> Result<f64> {
        let mut g = Graph::inference();
        let y = forward(&mut g, p, rows)?;
        let logits: Vec<Vec<f32>> = g.value(y).chunks(classes).map(<[f32]>::to_vec).collect();
        let ys: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        metrics::accuracy(&logits, &ys, classes)
    };
    let mut adam = AdamState::new(AdamConfig { lr: pc.lr, ..Default::default() });
    let mut order = split.train.clone();
    let mut curve = Vec::with_capacity(pc.epochs);
    let (mut best_val, mut best_epoch, mut best_p) = (f64::NEG_INFINITY, 0, p.clone());
    for epoch in 1..=pc.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(pc.batch) {
            let mut g = Graph::new();
            let y = forward(&mut g, &p, chunk)?;
            let ys: Vec<usize> = chunk.iter().map(|&r| labels[r]).collect();
            let loss = g.cross_entropy(y, &ys)?;
            let grads = g.backward(loss)?;
            p.accumulate(&grads);
            adam.step(&mut p)?;
        }
        let v = acc(&p, &split.val)?;
        curve.push(v);
        if v > best_val {
            (best_val, best_epoch, best_p) = (v, epoch, p.clone());
        }
    }
    let convergence_epoch = curve.iter().position(|&v| v >= 0.99 * best_val).map_or(pc.epochs, |i| i + 1);
    Ok(ProbeResult {
        name: name.to_string(),
        width: w,
        test_acc: acc(&best_p, &split.test)?,
        val_curve: curve,
        best_val,
        best_epoch,
        convergence_epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniversalReport {
    pub target: usize,
    pub feature_tasks: Vec<usize>,
    /// `pcl`, `np` (random features) and `ssp` (pretrained latents).
    pub rows: Vec<ProbeResult>,
}

impl UniversalReport {
    pub fn get(&self, name: &str) -> Option<&ProbeResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<6}{:>7}{:>10}{:>10}{:>12}", "feat", "width", "val", "test", "converge@").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<6}{:>7}{:>10.4}{:>10.4}{:>12}",
                r.name, r.width, r.best_val, r.test_acc, r.convergence_epoch
            )
            .unwrap();
        }
        s
    }
}

/// Compares exported prompted latents of `feature_tasks` with random and
/// pretrained-only features as inputs to a probe for `target`.
pub fn universal_representation(
    state: &ContinualState,
    ds: &Dataset,
    feature_tasks: &[usize],
    target: usize,
    pc: ProbeConfig,
) -> Result<UniversalReport> {
    let spec = ds.task(target).ok_or_else(|| PclError::Contract(format!("unknown task {target}")))?;
    ensure!(
        spec.kind == crate::task::TaskKind::Classification,
        Contract,
        "probe target {target} must be a classification task"
    );
    let labels = &ds.labels[&target];
    let split = crate::data::fraction_split(
        ds.num_users(),
        state.config.split.train,
        state.config.split.val,
        state.config.seed,
        target,
    )?;
    let (pcl, _) = export_user_representations(state, ds, feature_tasks)?;
    let (ssp, _) = export_user_representations(state, ds, &[crate::task::PRETRAIN_TASK])?;
    let mut rng = Rng::derived(pc.seed, tag("np-features"));
    let np = Tensor::randn(&[ds.num_users(), pcl.cols()], 1.0, &mut rng);
    let rows = vec![
        probe("pcl", &pcl, labels, spec.labels, &split, pc)?,
        probe("np", &np, labels, spec.labels, &split, pc)?,
        probe("ssp", &ssp, labels, spec.labels, &split, pc)?,
    ];
    Ok(UniversalReport { target, feature_tasks: feature_tasks.to_vec(), rows })
}
