use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pcl_core::backbone::Backbone;
use pcl_core::config::{Policy, RunConfig};
use pcl_core::data::synth::SyntheticSpec;
use pcl_core::data::Dataset;
use pcl_core::metrics::{self, MetricRecord};
use pcl_core::prompt::{embed_task_descriptions, PromptBank};
use pcl_core::runner::experiments::{
    cold_start_curves, export_user_representations, mask_cold_start, spread_table, Ablation, AblationReport,
    OrderReport,
};
use pcl_core::runner::{
    self, pretrain_with_cold, run_sequence, validate_order, ContinualState, SequenceReport, TaskRecord,
};
use pcl_core::task::PRETRAIN_TASK;
use pcl_core::tensor::checkpoint;

use crate::args::{ColdstartArgs, ExportArgs, PretrainArgs, ReportArgs, Stage, SynthArgs, TuneArgs};
use crate::run_dir::{self, RunManifest, BACKBONE, CONFIG, METRICS, PROMPTS, REPORT_JSON, REPORT_TEXT};
use crate::UsageError;

const PRETRAIN_RECORD: &str = "pretrain.json";

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| pcl_core::PclError::io(p, e))?;
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.users {
        spec.users = v;
    }
    if let Some(v) = a.items {
        spec.items = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let ds = spec.generate()?;
    let out = run_dir::create(&a.out, a.force, &[])?;
    ds.save(&out)?;
    println!("{} users, {} items, {} tasks, digest {}", ds.num_users(), ds.num_items(), ds.tasks.len(), ds.digest()?);
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = a.config.base()?;
    a.config.apply(&mut cfg, Stage::Pretrain)?;
    let ds = Dataset::load(&a.data)?;
    let digest = ds.digest()?;
    let out = run_dir::create(&a.out, a.force, &[&a.data])?;
    let state = runner::pretrain(&ds, &cfg)?;
    let rec = state.record(PRETRAIN_TASK).expect("pretraining record");

    run_dir::write(&out, CONFIG, cfg.to_toml())?;
    state.backbone.save(&out.join(BACKBONE))?;
    run_dir::write(&out, METRICS, metrics::to_csv(&rec.metrics))?;
    run_dir::write_json(&out, PRETRAIN_RECORD, rec)?;
    let text = record_text(rec);
    run_dir::write(&out, REPORT_TEXT, &text)?;
    run_dir::write_json(&out, run_dir::MANIFEST, &RunManifest::new("pretrain", &a.data, digest, cfg.seed, None))?;
    print!("{text}");
    Ok(())
}

fn record_text(r: &TaskRecord) -> String {
    let mut s = String::new();
    writeln!(s, "task {} ran {} epochs, best epoch {} (val {:.4})", r.task, r.epochs_run, r.best_epoch, r.best_val)
        .unwrap();
    for m in &r.metrics {
        writeln!(s, "  {:<8}{:<7}{:.4}", m.metric, m.protocol, m.value).unwrap();
    }
    s
}

/// The frozen state a pretrain run directory describes, under `cfg`.
fn pretrained_state(dir: &Path, ds: &Dataset, cfg: &RunConfig) -> Result<ContinualState> {
    let mut backbone = Backbone::load(&dir.join(BACKBONE), cfg.backbone.dropout)?;
    let (got, want) = (backbone.config(), &cfg.backbone);
    if (got.d, got.n, got.blocks, got.heads) != (want.d, want.n, want.blocks, want.heads) {
        bail!(UsageError(format!(
            "config asks for d={} n={} blocks={} heads={} but the checkpoint in {} has d={} n={} blocks={} heads={}",
            want.d,
            want.n,
            want.blocks,
            want.heads,
            dir.display(),
            got.d,
            got.n,
            got.blocks,
            got.heads
        )));
    }
    backbone.freeze();
    let record: TaskRecord = run_dir::read_json(dir, PRETRAIN_RECORD)?;
    Ok(ContinualState {
        config: cfg.clone(),
        descriptions: embed_task_descriptions(&ds.tasks, &cfg.prompt.provider, cfg.backbone.d)?,
        backbone,
        bank: PromptBank::new(),
        private: BTreeMap::new(),
        shared_ctx: None,
        history: vec![record],
        cold_items: Vec::new(),
    })
}

fn require_command(dir: &Path, want: &str) -> Result<RunManifest> {
    let m = run_dir::manifest(&run_dir::existing(dir)?)?;
    if m.command != want {
        bail!(UsageError(format!("{} is a `{}` run, expected a `{want}` run", dir.display(), m.command)));
    }
    Ok(m)
}

pub fn tune(a: &TuneArgs) -> Result<()> {
    require_command(&a.from, "pretrain")?;
    let (data, ds, digest) = run_dir::dataset_for(&a.from, a.data.as_deref())?;
    let mut cfg = match &a.config.config {
        Some(p) => RunConfig::load(p)?,
        None => run_dir::config(&a.from)?,
    };
    a.config.apply(&mut cfg, Stage::Tune)?;
    let order = match &a.order {
        Some(o) if o.contains(&PRETRAIN_TASK) => {
            bail!(UsageError(format!("task {PRETRAIN_TASK} is the pretraining task and cannot be part of --order")))
        }
        Some(o) => validate_order(&ds, o)?,
        None => ds.downstream_ids(),
    };
    let variants = a.ablation.as_deref().map(Ablation::parse_list).transpose()?;
    let pretrained = pretrained_state(&a.from, &ds, &cfg)?;
    let out = run_dir::create(&a.out, a.force, &[&a.from])?;
    let manifest = RunManifest::new("tune", &data, digest, cfg.seed, Some(&a.from));

    let Some(variants) = variants else {
        let mut st = pretrained;
        let rep = run_sequence(&mut st, &ds, &order)?;
        write_tune(&out, &st, &rep, &manifest)?;
        print!("{}", rep.to_text());
        return Ok(());
    };
    let mut runs = Vec::new();
    for v in variants {
        let mut st = v.apply(&pretrained, &ds)?;
        let rep = run_sequence(&mut st, &ds, &order)?;
        let sub = out.join(v.name());
        fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        write_tune(&sub, &st, &rep, &manifest)?;
        runs.push((v, rep));
    }
    let report = AblationReport::from_runs(runs);
    run_dir::write(&out, CONFIG, cfg.to_toml())?;
    run_dir::write_json(&out, "ablation.json", &report)?;
    run_dir::write(&out, "ablation.txt", report.to_text())?;
    run_dir::write_json(&out, run_dir::MANIFEST, &RunManifest { command: "ablation".into(), ..manifest })?;
    print!("{}", report.to_text());
    Ok(())
}

fn private_name(task: usize) -> String {
    format!("backbone.task{task}.pclt")
}

fn write_tune(dir: &Path, st: &ContinualState, rep: &SequenceReport, manifest: &RunManifest) -> Result<()> {
    run_dir::write(dir, CONFIG, st.config.to_toml())?;
    run_dir::write(dir, PROMPTS, st.bank.checkpoint_bytes()?)?;
    if st.config.policy == Policy::Sinmo {
        st.backbone.save(&dir.join(BACKBONE))?;
    }
    for (k, b) in &st.private {
        b.save(&dir.join(private_name(*k)))?;
    }
    run_dir::write(dir, METRICS, metrics::to_csv(&rep.metrics()))?;
    run_dir::write(dir, REPORT_JSON, rep.to_json())?;
    run_dir::write(dir, REPORT_TEXT, rep.to_text())?;
    run_dir::write_json(dir, run_dir::MANIFEST, manifest)
}

pub fn coldstart(a: &ColdstartArgs) -> Result<()> {
    let mut cfg = a.config.base()?;
    a.config.apply(&mut cfg, Stage::Both)?;
    if !(0.0..1.0).contains(&a.fraction) {
        bail!(UsageError(format!("--fraction must lie in [0, 1), got {}", a.fraction)));
    }
    let ds = Dataset::load(&a.data)?;
    let digest = ds.digest()?;
    let task = match a.task {
        Some(t) if ds.downstream_ids().contains(&t) => t,
        Some(t) => bail!(UsageError(format!("task {t} is not a downstream task of {}", a.data.display()))),
        None => *ds.downstream_ids().first().ok_or_else(|| UsageError("the dataset has no downstream tasks".into()))?,
    };
    if a.fraction > 0.0 {
        // Masking can leave users too short for a strict leave-one-out split.
        cfg.split.strict = false;
    }
    let out = run_dir::create(&a.out, a.force, &[&a.data])?;
    let (masked, cold) = mask_cold_start(&ds, a.fraction, cfg.seed, cfg.split.strict)?;
    let state = pretrain_with_cold(&masked, &cfg, cold)?;
    let report = cold_start_curves(&state, &ds, task, a.fraction)?;

    let mut text = String::new();
    writeln!(text, "task {task}, fraction {}, {} cold items", a.fraction, report.cold_items).unwrap();
    writeln!(text, "target (best val without prompts) {:.4}", report.target).unwrap();
    let show = |e: Option<usize>| e.map_or("never".to_string(), |e| e.to_string());
    writeln!(
        text,
        "epochs to target: prompts {}, no prompts {}",
        show(report.epochs_with),
        show(report.epochs_without)
    )
    .unwrap();

    run_dir::write(&out, CONFIG, cfg.to_toml())?;
    state.backbone.save(&out.join(BACKBONE))?;
    run_dir::write(&out, "curves.csv", report.curves_csv())?;
    run_dir::write(&out, METRICS, metrics::to_csv(&report.metrics))?;
    run_dir::write_json(&out, "coldstart.json", &report)?;
    run_dir::write(&out, REPORT_TEXT, &text)?;
    run_dir::write_json(&out, run_dir::MANIFEST, &RunManifest::new("coldstart", &a.data, digest, cfg.seed, None))?;
    print!("{text}");
    Ok(())
}

/// Rebuilds the final state of a tune run directory.
fn tuned_state(dir: &Path, ds: &Dataset) -> Result<ContinualState> {
    let m = run_dir::manifest(dir)?;
    let cfg = run_dir::config(dir)?;
    let source =
        m.source.clone().ok_or_else(|| UsageError(format!("{} does not name its pretrain run", dir.display())))?;
    let mut st = pretrained_state(&source, ds, &cfg)?;
    if dir.join(BACKBONE).is_file() {
        let mut b = Backbone::load(&dir.join(BACKBONE), cfg.backbone.dropout)?;
        b.freeze();
        st.backbone = b;
    }
    st.bank = PromptBank::from_tensors(checkpoint::load(&dir.join(PROMPTS))?)?;
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let Some(k) = name.strip_prefix("backbone.task").and_then(|r| r.strip_suffix(".pclt")) else {
            continue;
        };
        let k: usize = k.parse().with_context(|| format!("bad checkpoint name {name}"))?;
        let mut b = Backbone::load(&dir.join(&name), cfg.backbone.dropout)?;
        b.freeze();
        st.private.insert(k, b);
    }
    let rep: SequenceReport = run_dir::read_json(dir, REPORT_JSON)?;
    st.history = rep.tasks;
    Ok(st)
}

pub fn export(a: &ExportArgs) -> Result<()> {
    require_command(&a.from, "tune")?;
    let (data, ds, digest) = run_dir::dataset_for(&a.from, a.data.as_deref())?;
    let st = tuned_state(&a.from, &ds)?;
    for t in &a.tasks {
        if st.record(*t).is_none() || *t == PRETRAIN_TASK {
            bail!(UsageError(format!("task {t} was not tuned in {}", a.from.display())));
        }
    }
    let (features, manifest) = export_user_representations(&st, &ds, &a.tasks)?;
    let out = run_dir::create(&a.out, a.force, &[&a.from])?;
    checkpoint::save(&out.join("features.pclt"), [("features", &features)])?;
    run_dir::write_json(&out, "manifest.json", &manifest)?;
    run_dir::write_json(
        &out,
        run_dir::MANIFEST,
        &RunManifest::new("export", &data, digest, st.config.seed, Some(&a.from)),
    )?;
    println!(
        "{} users x {} features ({} tasks, d={})",
        features.rows(),
        manifest.width,
        manifest.tasks.len(),
        manifest.d
    );
    Ok(())
}

struct LoadedRun {
    name: String,
    config: Option<toml::Value>,
    metrics: Vec<MetricRecord>,
    report: Option<SequenceReport>,
}

fn load_run(dir: &Path, taken: &mut BTreeMap<String, usize>) -> Result<LoadedRun> {
    let dir = run_dir::existing(dir)?;
    let base = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    let n = taken.entry(base.clone()).or_insert(0);
    *n += 1;
    let name = if *n == 1 { base } else { format!("{base}#{n}") };
    if !dir.join(METRICS).is_file() {
        bail!(UsageError(format!("{} has no {METRICS}", dir.display())));
    }
    let metrics = metrics::from_csv(&run_dir::read(&dir, METRICS)?)?;
    let config = match run_dir::read(&dir, CONFIG) {
        Ok(text) => Some(toml::from_str(&text).with_context(|| format!("parsing {}", dir.join(CONFIG).display()))?),
        Err(_) => None,
    };
    let report = if dir.join(REPORT_JSON).is_file() { Some(run_dir::read_json(&dir, REPORT_JSON)?) } else { None };
    Ok(LoadedRun { name, config, metrics, report })
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, x) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Config keys whose values differ between runs.
fn config_conflicts(runs: &[LoadedRun]) -> Vec<String> {
    let flat: Vec<BTreeMap<String, String>> = runs
        .iter()
        .filter_map(|r| r.config.as_ref())
        .map(|c| {
            let mut m = BTreeMap::new();
            flatten("", c, &mut m);
            m
        })
        .collect();
    let keys: std::collections::BTreeSet<&String> = flat.iter().flat_map(|m| m.keys()).collect();
    keys.into_iter()
        .filter(|k| {
            let mut vals = flat.iter().map(|m| m.get(*k));
            let first = vals.next().flatten();
            vals.any(|v| v != first)
        })
        .cloned()
        .collect()
}

/// One row per (task, metric, protocol) and one column per run.
fn comparison_table(runs: &[LoadedRun]) -> String {
    let mut keys: Vec<(usize, String, String)> =
        runs.iter().flat_map(|r| r.metrics.iter().map(|m| (m.task, m.metric.clone(), m.protocol.clone()))).collect();
    keys.sort();
    keys.dedup();
    let width = runs.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8) + 2;
    let mut s = String::new();
    write!(s, "{:<6}{:<8}{:<10}", "task", "metric", "protocol").unwrap();
    for r in runs {
        write!(s, "{:>width$}", r.name).unwrap();
    }
    s.push('\n');
    for (task, metric, protocol) in keys {
        write!(s, "{task:<6}{metric:<8}{protocol:<10}").unwrap();
        for r in runs {
            match r.metrics.iter().find(|m| m.task == task && m.metric == metric && m.protocol == protocol) {
                Some(m) => write!(s, "{:>width$.4}", m.value).unwrap(),
                None => write!(s, "{:>width$}", "-").unwrap(),
            }
        }
        s.push('\n');
    }
    s
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut taken = BTreeMap::new();
    let runs: Vec<LoadedRun> = a.runs.iter().map(|d| load_run(d, &mut taken)).collect::<Result<_>>()?;
    let conflicts = config_conflicts(&runs);
    if !conflicts.is_empty() {
        eprintln!("warning: run configs differ in {}; showing the union of their metrics", conflicts.join(", "));
    }
    let mut text = comparison_table(&runs);
    let reports: Vec<SequenceReport> = runs.iter().filter_map(|r| r.report.clone()).collect();
    if reports.len() >= 2 {
        let spread = spread_table(&reports);
        text.push('\n');
        text.push_str(&OrderReport { runs: Vec::new(), spread }.to_text());
    }
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.series {
        let mut s = String::from("run,task,metric,protocol,order_index,value\n");
        for r in &runs {
            for m in &r.metrics {
                writeln!(s, "{},{},{},{},{},{}", r.name, m.task, m.metric, m.protocol, m.order_index, m.value).unwrap();
            }
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.curves {
        let mut s = String::from("run,task,epoch,loss,val\n");
        for r in &runs {
            for t in r.report.iter().flat_map(|rep| &rep.tasks) {
                for e in &t.curve {
                    writeln!(s, "{},{},{},{},{}", r.name, t.task, e.epoch, e.loss, e.val).unwrap();
                }
            }
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
