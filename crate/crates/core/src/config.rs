//! Resolved run configuration, stored verbatim in every run directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{ensure, PclError, Result};
use crate::metrics::RankingProtocol;
use crate::prompt::PromptConfig;

pub const SEED_ENV: &str = "PCL_SEED";

/// Writes an `f32` as its shortest decimal, so `0.2` stays `0.2` in files.
pub(crate) fn short_f32<S: serde::Serializer>(v: &f32, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.to_string().parse().expect("f32 display parses"))
}

fn short_f32_map<S: serde::Serializer>(m: &BTreeMap<String, f32>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(m.iter().map(|(k, v)| (k, v.to_string().parse::<f64>().expect("f32 display parses"))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Frozen backbone; prompts and adapter per task.
    Pcl,
    /// Fresh backbone trained from scratch for every task.
    SasrecPerTask,
    /// One shared backbone trained on every task in turn.
    Sinmo,
    /// Private copy of the pretrained backbone fine-tuned per task.
    Fineall,
    /// Frozen backbone; only the adapter trains.
    AdapterOnly,
}

/// What a policy trains in each downstream task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub backbone_frozen: bool,
    pub item_table_frozen: bool,
    pub prompts: bool,
    pub adapter: bool,
    /// Each task gets a private backbone (cloned or fresh).
    pub private_backbone: bool,
}

impl Policy {
    pub const ALL: [Policy; 5] =
        [Policy::Pcl, Policy::SasrecPerTask, Policy::Sinmo, Policy::Fineall, Policy::AdapterOnly];

    pub fn preset(self) -> FreezePolicy {
        let frozen = matches!(self, Policy::Pcl | Policy::AdapterOnly);
        FreezePolicy {
            backbone_frozen: frozen,
            item_table_frozen: frozen,
            prompts: self == Policy::Pcl,
            adapter: true,
            private_backbone: matches!(self, Policy::SasrecPerTask | Policy::Fineall),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Pcl => "pcl",
            Policy::SasrecPerTask => "sasrec-per-task",
            Policy::Sinmo => "sinmo",
            Policy::Fineall => "fineall",
            Policy::AdapterOnly => "adapter-only",
        })
    }
}

impl FromStr for Policy {
    type Err = PclError;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| PclError::Config(format!("unknown policy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch: usize,
    #[serde(serialize_with = "short_f32")]
    pub lr: f32,
    /// Sampled negatives per positive for link objectives.
    pub negatives: usize,
    /// Learning rate per task id.
    #[serde(serialize_with = "short_f32_map")]
    pub lr_overrides: BTreeMap<String, f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, patience: 5, batch: 128, lr: 1e-3, negatives: 1, lr_overrides: BTreeMap::new() }
    }
}

impl TrainConfig {
    pub fn lr_for(&self, task: usize) -> f32 {
        self.lr_overrides.get(&task.to_string()).copied().unwrap_or(self.lr)
    }

    fn validate(&self, what: &str) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "{what}.epochs must be positive");
        ensure!(self.batch >= 1, Config, "{what}.batch must be positive");
        ensure!(self.negatives >= 1, Config, "{what}.negatives must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "{what}.lr must be positive");
        for (k, lr) in &self.lr_overrides {
            ensure!(k.parse::<usize>().is_ok(), Config, "{what}.lr_overrides key `{k}` is not a task id");
            ensure!(*lr > 0.0 && lr.is_finite(), Config, "{what}.lr_overrides.{k} must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub protocol: RankingProtocol,
    /// Cutoffs reported for link tasks.
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { protocol: RankingProtocol::default(), ks: vec![5, 10] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    /// Too-short users are an error rather than dropped.
    pub strict: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.8, val: 0.1, strict: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub policy: Policy,
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    /// Heads of the contextual attention over task descriptions.
    pub ctx_heads: usize,
    pub pretrain: TrainConfig,
    pub tune: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    /// Hidden width of the representation probe.
    pub probe_hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            policy: Policy::Pcl,
            backbone: BackboneConfig::default(),
            prompt: PromptConfig::default(),
            ctx_heads: 2,
            pretrain: TrainConfig::default(),
            tune: TrainConfig::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
            probe_hidden: 32,
        }
    }
}

impl RunConfig {
    /// Small model for fast local runs.
    pub fn desk() -> Self {
        let backbone = BackboneConfig::desk();
        RunConfig { prompt: PromptConfig { window: 5, ..Default::default() }, backbone, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompt.validate(self.backbone.n)?;
        ensure!(
            self.ctx_heads >= 1 && self.backbone.d.is_multiple_of(self.ctx_heads),
            Config,
            "d={} is not divisible by ctx_heads={}",
            self.backbone.d,
            self.ctx_heads
        );
        self.pretrain.validate("pretrain")?;
        self.tune.validate("tune")?;
        ensure!(!self.eval.ks.is_empty() && self.eval.ks.iter().all(|&k| k >= 1), Config, "eval.ks must be positive");
        if let RankingProtocol::Batch { negatives, .. } = self.eval.protocol {
            ensure!(negatives >= 1, Config, "batch ranking needs at least one negative");
        }
        ensure!(self.probe_hidden >= 1, Config, "probe_hidden must be positive");
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PclError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PclError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PclError::Config(m) => PclError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `PCL_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| PclError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.tune.lr_overrides.insert("3".into(), 0.01);
        cfg.eval.protocol = RankingProtocol::All;
        let text = cfg.to_toml();
        assert!(text.contains("dropout = 0.2\n") && text.contains("\n3 = 0.01\n"), "{text}");
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.tune.lr_for(3), 0.01);
        assert_eq!(back.tune.lr_for(2), 1e-3);
    }

    proptest::proptest! {
        #[test]
        fn any_f32_survives_the_file(lr in proptest::num::f32::POSITIVE | proptest::num::f32::NORMAL, lambda in 0.0f32..1.0) {
            let mut cfg = RunConfig::desk();
            cfg.tune.lr = lr;
            cfg.prompt.lambda = lambda;
            cfg.pretrain.lr_overrides.insert("1".into(), lr);
            proptest::prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\npolicy = \"sinmo\"\n[backbone]\nd = 32\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.policy, Policy::Sinmo);
        assert_eq!(cfg.backbone.d, 32);
        assert_eq!(cfg.backbone.n, 50);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[prompt]\nwindow = 99\n"), Err(PclError::Config(_))));
        assert!(matches!(RunConfig::from_toml("ctx_heads = 3\n"), Err(PclError::Config(_))));
        assert!(matches!(RunConfig::from_toml("policy = \"nope\"\n"), Err(PclError::Config(_))));
    }

    #[test]
    fn policy_names() {
        for p in Policy::ALL {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!(Policy::Pcl.preset().backbone_frozen);
        assert!(!Policy::Sinmo.preset().backbone_frozen);
        assert!(Policy::Fineall.preset().private_backbone);
    }
}
