use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use pcl_core::tensor::checkpoint;
use tempfile::TempDir;

const FAST: [&str; 6] = ["--epochs", "3", "--lr", "0.01", "--patience", "3"];

fn pcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcl"))
        .current_dir(dir)
        .env_remove("PCL_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pcl(dir, args);
    assert!(
        out.status.success(),
        "pcl {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn ok_owned(dir: &Path, args: &[String]) -> String {
    let v: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir, &v)
}

/// A temp dir holding `data/` (120 users) and a desk-preset pretrain run `pre/`.
fn workspace() -> TempDir {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth", "--out", "data", "--users", "120", "--items", "80", "--seed", "3"]);
    ok_owned(t.path(), &with(&["pretrain", "--data", "data", "--out", "pre", "--preset", "desk"], &FAST));
    t
}

fn tune(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = with(&["tune", "--from", "pre", "--out", out], &FAST);
    args.extend(extra.iter().map(|s| s.to_string()));
    ok_owned(dir, &args)
}

fn bytes(p: PathBuf) -> Vec<u8> {
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pretrain_rerun_is_byte_identical() {
    let t = workspace();
    let p = t.path();
    ok_owned(p, &with(&["pretrain", "--data", "data", "--out", "again", "--preset", "desk"], &FAST));
    assert_eq!(bytes(p.join("pre/backbone.pclt")), bytes(p.join("again/backbone.pclt")));
    assert_eq!(bytes(p.join("pre/metrics.csv")), bytes(p.join("again/metrics.csv")));
    // The resolved config alone reproduces the run.
    ok(p, &["pretrain", "--data", "data", "--out", "replay", "--config", "pre/config.toml"]);
    assert_eq!(bytes(p.join("pre/backbone.pclt")), bytes(p.join("replay/backbone.pclt")));
    let manifest = fs::read_to_string(p.join("pre/run.json")).unwrap();
    assert!(manifest.contains("dataset_digest"), "{manifest}");
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let t = TempDir::new().unwrap();
    let out = pcl(t.path(), &["pretrain", "--data", "no/such/dataset", "--out", "pre"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/dataset"));
    assert!(!t.path().join("pre").exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let t = TempDir::new().unwrap();
    assert_eq!(pcl(t.path(), &["pretrain", "--bogus"]).status.code(), Some(2));
    assert_eq!(pcl(t.path(), &["tune", "--from", "nowhere", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn existing_run_dirs_need_force() {
    let t = workspace();
    let p = t.path();
    let before = bytes(p.join("pre/backbone.pclt"));
    let out = pcl(p, &["pretrain", "--data", "data", "--out", "pre", "--preset", "desk", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert_eq!(bytes(p.join("pre/backbone.pclt")), before);
    ok(p, &["pretrain", "--data", "data", "--out", "pre", "--preset", "desk", "--epochs", "1", "--force"]);
    assert_ne!(bytes(p.join("pre/backbone.pclt")), before);
    // A tune run may not overwrite the run it reads from.
    let out = pcl(p, &["tune", "--from", "pre", "--out", "pre", "--force"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(p.join("pre/backbone.pclt").is_file());
}

#[test]
fn seed_env_overrides_config() {
    let t = workspace();
    let p = t.path();
    let out = Command::new(env!("CARGO_BIN_EXE_pcl"))
        .current_dir(p)
        .env("PCL_SEED", "7")
        .args(["pretrain", "--data", "data", "--out", "seeded", "--preset", "desk", "--epochs", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = pcl_core::config::RunConfig::load(&p.join("seeded/config.toml")).unwrap();
    assert_eq!(cfg.seed, 7);
    let out = Command::new(env!("CARGO_BIN_EXE_pcl"))
        .current_dir(p)
        .env("PCL_SEED", "seven")
        .args(["pretrain", "--data", "data", "--out", "bad", "--preset", "desk"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tune_never_touches_the_pretrain_checkpoint() {
    let t = workspace();
    let p = t.path();
    let before = bytes(p.join("pre/backbone.pclt"));
    tune(p, "pcl", &["--order", "4,2,3"]);
    assert_eq!(bytes(p.join("pre/backbone.pclt")), before);
    assert!(!p.join("pcl/backbone.pclt").exists());
    for f in ["config.toml", "run.json", "prompts.pclt", "metrics.csv", "report.json", "report.txt"] {
        assert!(p.join("pcl").join(f).is_file(), "missing {f}");
    }
    // Even a policy that updates its own copy of the backbone.
    tune(p, "sinmo", &["--policy", "sinmo"]);
    assert_eq!(bytes(p.join("pre/backbone.pclt")), before);
    assert_ne!(bytes(p.join("sinmo/backbone.pclt")), before);
}

#[test]
fn tune_is_reproducible_from_its_config() {
    let t = workspace();
    let p = t.path();
    tune(p, "a", &["--order", "3,4,2"]);
    ok(p, &["tune", "--from", "pre", "--out", "b", "--order", "3,4,2", "--config", "a/config.toml"]);
    assert_eq!(bytes(p.join("a/report.json")), bytes(p.join("b/report.json")));
    assert_eq!(bytes(p.join("a/prompts.pclt")), bytes(p.join("b/prompts.pclt")));
}

#[test]
fn orders_must_be_downstream_permutations() {
    let t = workspace();
    let p = t.path();
    for bad in ["1,2,3", "2,3", "2,3,9", "2,2,3,4"] {
        let out = pcl(p, &["tune", "--from", "pre", "--out", "x", "--order", bad]);
        assert_eq!(out.status.code(), Some(2), "order {bad}");
        assert!(!p.join("x").exists());
    }
}

#[test]
fn ablation_all_writes_the_three_variant_table() {
    let t = workspace();
    let p = t.path();
    let table = tune(p, "abl", &["--ablation", "all"]);
    let header = table.lines().next().unwrap();
    for v in ["full", "no_ctx", "no_plm"] {
        assert!(header.contains(v), "{header}");
        assert!(p.join("abl").join(v).join("report.json").is_file());
    }
    // One row per (task, metric): task 1 has two cutoffs.
    assert_eq!(table.lines().count(), 1 + 2 + 3);
    assert_eq!(fs::read_to_string(p.join("abl/ablation.txt")).unwrap(), table);
    let out = pcl(p, &["tune", "--from", "pre", "--out", "abl2", "--ablation", "full,bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn coldstart_without_cold_items_matches_a_tune_run() {
    let t = workspace();
    let p = t.path();
    tune(p, "tune", &["--order", "4,2,3"]);
    ok_owned(
        p,
        &with(
            &["coldstart", "--data", "data", "--out", "cold", "--preset", "desk", "--fraction", "0", "--task", "4"],
            &FAST,
        ),
    );
    let cold = pcl_core::metrics::from_csv(&fs::read_to_string(p.join("cold/metrics.csv")).unwrap()).unwrap();
    let tuned = pcl_core::metrics::from_csv(&fs::read_to_string(p.join("tune/metrics.csv")).unwrap()).unwrap();
    let tuned: Vec<_> = tuned.into_iter().filter(|m| m.task == 4).collect();
    assert!(!cold.is_empty());
    assert_eq!(cold, tuned);
    let curves = fs::read_to_string(p.join("cold/curves.csv")).unwrap();
    assert!(curves.starts_with("variant,epoch,loss,val\n"));
    assert!(curves.contains("\nprompts,1,") && curves.contains("\nno_prompts,1,"));
}

#[test]
fn coldstart_with_masked_items() {
    let t = workspace();
    let p = t.path();
    let text = ok_owned(
        p,
        &with(
            &["coldstart", "--data", "data", "--out", "cold", "--preset", "desk", "--fraction", "0.5", "--task", "3"],
            &FAST,
        ),
    );
    assert!(text.contains("40 cold items"), "{text}");
    let out = pcl(p, &["coldstart", "--data", "data", "--out", "c2", "--fraction", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_concatenates_task_blocks() {
    let t = workspace();
    let p = t.path();
    tune(p, "tune", &[]);
    ok(p, &["export", "--from", "tune", "--out", "exp", "--tasks", "2,3"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("exp/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["d"], 16);
    assert_eq!(m["width"], 32);
    assert_eq!(m["users"].as_array().unwrap().len(), 120);
    let feats = checkpoint::load(&p.join("exp/features.pclt")).unwrap();
    assert_eq!(feats.len(), 1);
    assert_eq!(feats[0].1.shape(), &[120, 32]);
    // Export is a pure function of the run directory.
    ok(p, &["export", "--from", "tune", "--out", "exp2", "--tasks", "2,3"]);
    assert_eq!(bytes(p.join("exp/features.pclt")), bytes(p.join("exp2/features.pclt")));
    let out = pcl(p, &["export", "--from", "pre", "--out", "exp3", "--tasks", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_reads_private_backbones() {
    let t = workspace();
    let p = t.path();
    tune(p, "fine", &["--policy", "fineall"]);
    assert!(p.join("fine/backbone.task2.pclt").is_file());
    ok(p, &["export", "--from", "fine", "--out", "exp", "--tasks", "4"]);
    let feats = checkpoint::load(&p.join("exp/features.pclt")).unwrap();
    assert_eq!(feats[0].1.shape(), &[120, 16]);
}

#[test]
fn report_over_every_order() {
    let t = workspace();
    let p = t.path();
    let orders = ["2,3,4", "2,4,3", "3,2,4", "3,4,2", "4,2,3", "4,3,2"];
    let dirs: Vec<String> = orders.iter().map(|o| format!("o{}", o.replace(',', ""))).collect();
    for (o, d) in orders.iter().zip(&dirs) {
        tune(p, d, &["--order", o]);
    }
    let mut args = vec!["report".to_string()];
    args.extend(dirs.iter().cloned());
    args.extend(["--series", "series.csv", "--curves", "curves.csv", "--out", "table.txt"].map(String::from));
    let v: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = pcl(p, &v);
    assert!(out.status.success());
    assert!(out.stderr.is_empty(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let spread: Vec<&str> = text.lines().skip_while(|l| !l.contains("spread")).skip(1).collect();
    for task in [2, 3, 4] {
        let row = spread.iter().find(|l| l.starts_with(&task.to_string())).unwrap();
        assert_eq!(row.split_whitespace().nth(2), Some("6"), "{row}");
    }
    let series = fs::read_to_string(p.join("series.csv")).unwrap();
    // Five metric rows per run: two for task 1 and one per downstream task.
    assert_eq!(series.lines().count(), 1 + 6 * 5);
    assert_eq!(fs::read_to_string(p.join("table.txt")).unwrap(), text);
}

#[test]
fn report_warns_on_conflicting_configs() {
    let t = workspace();
    let p = t.path();
    tune(p, "a", &[]);
    tune(p, "b", &["--lambda", "0.5"]);
    let out = pcl(p, &["report", "a", "b", "pre"]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warning") && err.contains("prompt.lambda"), "{err}");
    let text = String::from_utf8(out.stdout).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.contains(" a") && header.contains(" b") && header.contains("pre"));
    // The pretrain run has no downstream rows; the union still lists them.
    let row = text.lines().find(|l| l.starts_with("2 ")).unwrap();
    assert!(row.trim_end().ends_with('-'), "{row}");
}

#[test]
fn selftest_passes() {
    let t = TempDir::new().unwrap();
    let text = ok(t.path(), &["selftest"]);
    assert!(text.lines().count() >= 7);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn desk_pretrain_fits_in_a_minute() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(p, &["synth", "--out", "data"]);
    let start = Instant::now();
    ok(p, &["pretrain", "--data", "data", "--out", "pre", "--preset", "desk", "--epochs", "20"]);
    let took = start.elapsed();
    assert!(took < Duration::from_secs(60), "{took:?}");
}
