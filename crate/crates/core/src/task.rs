//! Task identity: kind, label space, adapter head and natural-language
//! description.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure, PclError, Result};

/// The self-supervised next-item task always has this id.
pub const PRETRAIN_TASK: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Link,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    CrossEntropy,
}

/// Validation/selection metric of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    HitRatio(usize),
    Accuracy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::HitRatio(k) => write!(f, "hr@{k}"),
            Metric::Accuracy => f.write_str("acc"),
        }
    }
}

impl FromStr for Metric {
    type Err = PclError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "acc" {
            return Ok(Metric::Accuracy);
        }
        s.strip_prefix("hr@")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(Metric::HitRatio)
            .ok_or_else(|| PclError::Config(format!("unknown metric `{s}` (expected hr@K or acc)")))
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Head mapping the behavior latent to class logits.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum AdapterShape {
    #[default]
    None,
    Linear,
    Mlp(Vec<usize>),
}

impl fmt::Display for AdapterShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterShape::None => f.write_str("none"),
            AdapterShape::Linear => f.write_str("linear"),
            AdapterShape::Mlp(h) => {
                let dims: Vec<String> = h.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", dims.join(","))
            }
        }
    }
}

impl FromStr for AdapterShape {
    type Err = PclError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(AdapterShape::None),
            "linear" => Ok(AdapterShape::Linear),
            other => {
                let dims =
                    other.strip_prefix("mlp:").ok_or_else(|| PclError::Config(format!("unknown adapter `{other}`")))?;
                let hidden = dims
                    .split(',')
                    .map(|x| x.trim().parse::<usize>().ok().filter(|&h| h > 0))
                    .collect::<Option<Vec<_>>>()
                    .filter(|h| !h.is_empty())
                    .ok_or_else(|| PclError::Config(format!("bad mlp hidden sizes `{dims}`")))?;
                Ok(AdapterShape::Mlp(hidden))
            }
        }
    }
}

impl Serialize for AdapterShape {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AdapterShape {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// The four description fields fed to the text-embedding provider.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub name: String,
    pub input: String,
    pub output: String,
    pub metric: String,
}

impl TaskDescription {
    pub fn text(&self) -> String {
        format!("task: {}. input: {}. output: {}. metric: {}.", self.name, self.input, self.output, self.metric)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    pub metric: Metric,
    /// Class count for classification; 0 for link tasks.
    #[serde(default)]
    pub labels: usize,
    #[serde(default)]
    pub adapter: AdapterShape,
    /// Adds a trainable item-attribute embedding sequence for this task.
    #[serde(default)]
    pub attributes: bool,
    pub description: TaskDescription,
}

impl TaskSpec {
    pub fn pretrain() -> Self {
        TaskSpec {
            id: PRETRAIN_TASK,
            kind: TaskKind::Link,
            metric: Metric::HitRatio(10),
            labels: 0,
            adapter: AdapterShape::None,
            attributes: false,
            description: TaskDescription {
                name: "next item prediction".into(),
                input: "user behavior sequence of item ids".into(),
                output: "id of the next interacted item".into(),
                metric: "hit ratio at 5 and 10".into(),
            },
        }
    }

    pub fn loss(&self) -> LossKind {
        match self.kind {
            TaskKind::Link => LossKind::Bce,
            TaskKind::Classification => LossKind::CrossEntropy,
        }
    }

    pub fn is_pretrain(&self) -> bool {
        self.id == PRETRAIN_TASK
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.id >= 1, Config, "task ids start at 1");
        match self.kind {
            TaskKind::Link => {
                ensure!(
                    matches!(self.metric, Metric::HitRatio(_)),
                    Config,
                    "link task {} must use an hr@K metric",
                    self.id
                );
                ensure!(self.labels == 0, Config, "link task {} declares a label count", self.id);
            }
            TaskKind::Classification => {
                ensure!(self.metric == Metric::Accuracy, Config, "classification task {} must use acc", self.id);
                ensure!(self.labels >= 2, Config, "classification task {} needs >= 2 labels", self.id);
                ensure!(self.adapter != AdapterShape::None, Config, "classification task {} needs an adapter", self.id);
            }
        }
        if self.is_pretrain() {
            ensure!(self.kind == TaskKind::Link, Config, "task 1 must be next-item link prediction");
        }
        Ok(())
    }
}
