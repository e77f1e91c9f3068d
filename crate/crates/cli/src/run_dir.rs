use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pcl_core::config::RunConfig;
use pcl_core::data::Dataset;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "run.json";
pub const BACKBONE: &str = "backbone.pclt";
pub const PROMPTS: &str = "prompts.pclt";
pub const METRICS: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// `run.json`: what produced a run directory and from which inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub data: PathBuf,
    /// Hex SHA-256 of the canonical dataset files.
    pub dataset_digest: String,
    pub seed: u64,
    /// Run directory this one was built from.
    pub source: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, data: &Path, digest: String, seed: u64, source: Option<&Path>) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            data: absolute(data),
            dataset_digest: digest,
            seed,
            source: source.map(absolute),
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Creates `dir`, refusing to touch an existing one unless `force`.
pub fn create(dir: &Path, force: bool, protect: &[&Path]) -> Result<PathBuf> {
    if dir.exists() {
        let here = absolute(dir);
        if protect.iter().any(|p| absolute(p) == here) {
            return Err(UsageError(format!("{} is an input of this command", dir.display())).into());
        }
        if !force {
            return Err(UsageError(format!("{} already exists; pass --force to overwrite it", dir.display())).into());
        }
        if dir.is_dir() {
            fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
        } else {
            fs::remove_file(dir).with_context(|| format!("removing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

/// An existing run directory given as input.
pub fn existing(dir: &Path) -> Result<PathBuf> {
    if !dir.join(MANIFEST).is_file() {
        return Err(UsageError(format!("{} is not a run directory (no {MANIFEST})", dir.display())).into());
    }
    Ok(dir.to_path_buf())
}

pub fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write(dir, name, serde_json::to_string_pretty(value)? + "\n")
}

pub fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    serde_json::from_str(&read(dir, name)?).with_context(|| format!("parsing {}", dir.join(name).display()))
}

pub fn manifest(dir: &Path) -> Result<RunManifest> {
    read_json(dir, MANIFEST)
}

pub fn config(dir: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(&dir.join(CONFIG))?)
}

/// Loads the dataset a run used, checking it still has the recorded digest.
pub fn dataset_for(run: &Path, data: Option<&Path>) -> Result<(PathBuf, Dataset, String)> {
    let m = manifest(run)?;
    let path = data.map(Path::to_path_buf).unwrap_or(m.data);
    let ds = Dataset::load(&path)?;
    let digest = ds.digest()?;
    if digest != m.dataset_digest {
        return Err(UsageError(format!(
            "dataset {} has digest {digest}, but {} was built from {}",
            path.display(),
            run.display(),
            m.dataset_digest
        ))
        .into());
    }
    Ok((path, ds, digest))
}
