//! Planted-Markov synthetic datasets with rule-generated task labels.
//!
//! Items belong to `categories` categories. Each item has `branching` fixed
//! successors, drawn from its own category with probability `coherence`,
//! and one planted "liked" item. Every user carries a latent
//! group that prefers categories `c` with `c % groups == group`. A step
//! follows a successor with probability `follow`, otherwise jumps to a
//! random item of a preferred category with probability `affinity`, and
//! otherwise to a uniform item.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{ensure, Result};
use crate::rng::{tag, Rng};
use crate::task::{AdapterShape, Metric, TaskDescription, TaskKind, TaskSpec};

/// How a downstream label is computed from a user's sequence and latent
/// group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum Rule {
    /// Category of the item `offset` steps before the last one.
    CategoryAt { offset: usize },
    /// Most frequent category among the last `window` items (ties go to the
    /// lowest category).
    WindowMajority { window: usize },
    /// Sum of the categories of the last `window` items modulo `classes`.
    WindowSum { window: usize, classes: usize },
    /// The user's latent group.
    Group,
    /// The latent group folded into `classes` buckets.
    GroupCoarse { classes: usize },
    /// Link task: the planted liked item of the last item.
    Liked,
    /// Link task: one more step of the user's Markov chain.
    NextItem,
}

impl Rule {
    pub fn window(&self) -> usize {
        match self {
            Rule::CategoryAt { offset } => offset + 1,
            Rule::WindowMajority { window } | Rule::WindowSum { window, .. } => *window,
            Rule::Liked => 1,
            Rule::Group | Rule::GroupCoarse { .. } | Rule::NextItem => 0,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Rule::Liked | Rule::NextItem => TaskKind::Link,
            _ => TaskKind::Classification,
        }
    }

    fn classes(&self, spec: &SyntheticSpec) -> usize {
        match self {
            Rule::CategoryAt { .. } | Rule::WindowMajority { .. } => spec.categories,
            Rule::WindowSum { classes, .. } | Rule::GroupCoarse { classes } => *classes,
            Rule::Group => spec.groups,
            Rule::Liked | Rule::NextItem => 0,
        }
    }

    fn describe(&self) -> TaskDescription {
        let (name, output) = match self {
            Rule::CategoryAt { offset } => {
                (format!("category of interaction {offset} before the latest"), "category class")
            }
            Rule::WindowMajority { window } => {
                (format!("dominant category of the last {window} interactions"), "category class")
            }
            Rule::WindowSum { window, .. } => (format!("category mix of the last {window} interactions"), "mix class"),
            Rule::Group => ("user profile group".into(), "group class"),
            Rule::GroupCoarse { .. } => ("coarse user profile group".into(), "coarse group class"),
            Rule::Liked => ("item the user will like".into(), "item id"),
            Rule::NextItem => ("next item after the observed history".into(), "item id"),
        };
        let metric = if self.kind() == TaskKind::Link { "hit ratio at 5 and 10" } else { "accuracy" };
        TaskDescription {
            name,
            input: "user behavior sequence of item ids".into(),
            output: output.into(),
            metric: metric.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    #[serde(flatten)]
    pub rule: Rule,
    /// Probability of replacing the rule label with a uniform one.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub adapter: Option<AdapterShape>,
    #[serde(default)]
    pub attributes: bool,
}

impl SynthTask {
    pub fn new(rule: Rule, noise: f64) -> Self {
        SynthTask { rule, noise, adapter: None, attributes: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Longest generated sequence.
    pub max_len: usize,
    pub min_len: usize,
    pub categories: usize,
    pub groups: usize,
    pub branching: usize,
    pub coherence: f64,
    pub follow: f64,
    pub affinity: f64,
    /// Largest rule window allowed; set to the prompt window `t`.
    pub max_window: usize,
    pub tasks: Vec<SynthTask>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 500,
            items: 200,
            max_len: 20,
            min_len: 8,
            categories: 4,
            groups: 2,
            branching: 3,
            coherence: 0.8,
            follow: 0.6,
            affinity: 0.3,
            max_window: 5,
            tasks: vec![
                SynthTask::new(Rule::CategoryAt { offset: 0 }, 0.0),
                SynthTask::new(Rule::WindowMajority { window: 3 }, 0.1),
                SynthTask::new(Rule::Group, 0.1),
            ],
            seed: 0,
        }
    }
}

/// Planted structure shared by the generator and rule oracles.
#[derive(Clone, Debug)]
pub struct World {
    /// Category of dense item `i` at index `i` (index 0 unused).
    pub category: Vec<usize>,
    pub successors: Vec<Vec<usize>>,
    pub liked: Vec<usize>,
    pub by_category: Vec<Vec<usize>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.users >= 3 && self.items >= 2, Config, "need at least 3 users and 2 items");
        ensure!(self.categories >= 2 && self.categories <= self.items, Config, "categories must be in 2..=items");
        ensure!(self.groups >= 1 && self.groups <= self.categories, Config, "groups must be in 1..=categories");
        ensure!(
            self.min_len >= 3 && self.min_len <= self.max_len,
            Config,
            "lengths must satisfy 3 <= min_len <= max_len"
        );
        ensure!(self.branching >= 1, Config, "branching must be positive");
        ensure!(
            [self.follow, self.affinity, self.coherence].iter().all(|p| (0.0..=1.0).contains(p)),
            Config,
            "transition probabilities must be in [0, 1]"
        );
        for (i, t) in self.tasks.iter().enumerate() {
            ensure!((0.0..=1.0).contains(&t.noise), Config, "task {} noise outside [0, 1]", i + 2);
            ensure!(
                t.rule.window() <= self.max_window,
                Config,
                "task {} looks at {} items but the prompt window is {}",
                i + 2,
                t.rule.window(),
                self.max_window
            );
            ensure!(t.rule.window() <= self.min_len, Config, "task {} window exceeds min_len", i + 2);
            if let Rule::WindowSum { classes, .. } | Rule::GroupCoarse { classes } = t.rule {
                ensure!(classes >= 2, Config, "task {} needs at least 2 classes", i + 2);
            }
        }
        Ok(())
    }

    pub fn world(&self) -> World {
        let mut rng = Rng::derived(self.seed, tag("synth-world"));
        let mut order: Vec<usize> = (1..=self.items).collect();
        rng.shuffle(&mut order);
        let mut category = vec![0; self.items + 1];
        let mut by_category = vec![Vec::new(); self.categories];
        for (k, &i) in order.iter().enumerate() {
            category[i] = k % self.categories;
        }
        for i in 1..=self.items {
            by_category[category[i]].push(i);
        }
        let pick = |rng: &mut Rng| 1 + rng.below(self.items);
        let mut successors = vec![Vec::new()];
        for i in 1..=self.items {
            let own = &by_category[category[i]];
            successors.push(
                (0..self.branching)
                    .map(|_| if rng.bernoulli(self.coherence) { own[rng.below(own.len())] } else { pick(&mut rng) })
                    .collect(),
            );
        }
        let liked = (0..=self.items).map(|_| pick(&mut rng)).collect();
        World { category, successors, liked, by_category }
    }

    fn step(&self, w: &World, rng: &mut Rng, cur: Option<usize>, group: usize) -> usize {
        let u = rng.uniform_f64();
        match cur {
            Some(c) if u < self.follow => w.successors[c][rng.below(self.branching)],
            _ if rng.uniform_f64() < self.affinity || cur.is_none() => {
                let prefs: Vec<usize> = (0..self.categories).filter(|c| c % self.groups == group).collect();
                let cat = prefs[rng.below(prefs.len())];
                let pool = &w.by_category[cat];
                pool[rng.below(pool.len())]
            }
            _ => 1 + rng.below(self.items),
        }
    }

    /// Rule label before noise.
    pub fn clean_label(&self, w: &World, rule: &Rule, seq: &[usize], group: usize, next: usize) -> usize {
        let cat_from_end = |k: usize| w.category[seq[seq.len() - 1 - k]];
        match rule {
            Rule::CategoryAt { offset } => cat_from_end(*offset),
            Rule::WindowMajority { window } => {
                let mut counts = vec![0usize; self.categories];
                (0..*window).for_each(|k| counts[cat_from_end(k)] += 1);
                let best = *counts.iter().max().unwrap();
                counts.iter().position(|&c| c == best).unwrap()
            }
            Rule::WindowSum { window, classes } => (0..*window).map(cat_from_end).sum::<usize>() % classes,
            Rule::Group => group,
            Rule::GroupCoarse { classes } => group % classes,
            Rule::Liked => w.liked[seq[seq.len() - 1]],
            Rule::NextItem => next,
        }
    }

    /// Deterministic in `self`; users are named `u0001`... and items by
    /// their dense id. Item attributes are categories (1-based).
    pub fn generate(&self) -> Result<Dataset> {
        Ok(self.generate_with_groups()?.0)
    }

    /// Like [`generate`](Self::generate), also returning each user's latent
    /// group.
    pub fn generate_with_groups(&self) -> Result<(Dataset, Vec<usize>)> {
        self.validate()?;
        let w = self.world();
        let mut rng = Rng::derived(self.seed, tag("synth-users"));
        let width = self.users.to_string().len().max(4);
        let mut users = Vec::with_capacity(self.users);
        let mut sequences = Vec::with_capacity(self.users);
        let mut groups = Vec::with_capacity(self.users);
        let mut nexts = Vec::with_capacity(self.users);
        for u in 0..self.users {
            let group = rng.below(self.groups);
            let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
            let mut seq = Vec::with_capacity(len);
            let mut cur = None;
            for _ in 0..len {
                let x = self.step(&w, &mut rng, cur, group);
                seq.push(x);
                cur = Some(x);
            }
            nexts.push(self.step(&w, &mut rng, cur, group));
            users.push(format!("u{:0width$}", u + 1));
            sequences.push(seq);
            groups.push(group);
        }

        let mut tasks = vec![TaskSpec::pretrain()];
        let mut labels = BTreeMap::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let id = i + 2;
            let kind = t.rule.kind();
            let classes = t.rule.classes(self);
            let mut noise_rng = Rng::derived(self.seed, tag("synth-noise") ^ id as u64);
            let ys = (0..self.users)
                .map(|u| {
                    let clean = self.clean_label(&w, &t.rule, &sequences[u], groups[u], nexts[u]);
                    if noise_rng.bernoulli(t.noise) {
                        match kind {
                            TaskKind::Classification => noise_rng.below(classes),
                            TaskKind::Link => 1 + noise_rng.below(self.items),
                        }
                    } else {
                        clean
                    }
                })
                .collect();
            labels.insert(id, ys);
            tasks.push(TaskSpec {
                id,
                kind,
                metric: if kind == TaskKind::Link { Metric::HitRatio(10) } else { Metric::Accuracy },
                labels: classes,
                adapter: t.adapter.clone().unwrap_or(match kind {
                    TaskKind::Link => AdapterShape::None,
                    TaskKind::Classification => AdapterShape::Linear,
                }),
                attributes: t.attributes,
                description: t.rule.describe(),
            });
        }
        let mut attrs = vec![0];
        attrs.extend((1..=self.items).map(|i| w.category[i] + 1));
        let ds = Dataset {
            items: (1..=self.items).map(|i| i.to_string()).collect(),
            item_attrs: Some(attrs),
            num_attrs: self.categories,
            users,
            sequences,
            tasks,
            labels,
        };
        ds.validate()?;
        Ok((ds, groups))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rule: Rule, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            users: 300,
            items: 60,
            tasks: vec![SynthTask::new(rule, noise)],
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = SyntheticSpec::default();
        let a = s.generate().unwrap();
        let b = s.generate().unwrap();
        assert_eq!(a.files().unwrap(), b.files().unwrap());
        let c = SyntheticSpec { seed: 1, ..s }.generate().unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn noiseless_last_category_matches_oracle() {
        let spec = small(Rule::CategoryAt { offset: 0 }, 0.0);
        let ds = spec.generate().unwrap();
        let w = spec.world();
        // 1-NN on the last item: the label is the last item's category.
        let hits =
            ds.sequences.iter().zip(&ds.labels[&2]).filter(|(s, &y)| w.category[*s.last().unwrap()] == y).count();
        assert_eq!(hits, ds.num_users());
    }

    #[test]
    fn full_noise_labels_are_near_uniform() {
        let spec = SyntheticSpec { users: 2000, ..small(Rule::CategoryAt { offset: 0 }, 1.0) };
        let ds = spec.generate().unwrap();
        let w = spec.world();
        let agree =
            ds.sequences.iter().zip(&ds.labels[&2]).filter(|(s, &y)| w.category[*s.last().unwrap()] == y).count();
        let p = 1.0 / spec.categories as f64;
        let sigma = (p * (1.0 - p) / 2000.0).sqrt();
        assert!((agree as f64 / 2000.0 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn rule_window_must_fit_prompt_window() {
        let mut spec = small(Rule::WindowMajority { window: 6 }, 0.0);
        assert!(spec.generate().is_err());
        spec.max_window = 6;
        assert!(spec.generate().is_ok());
    }

    #[test]
    fn link_rules_label_items() {
        let spec = small(Rule::Liked, 0.0);
        let ds = spec.generate().unwrap();
        assert_eq!(ds.tasks[1].kind, TaskKind::Link);
        assert!(ds.labels[&2].iter().all(|&y| (1..=spec.items).contains(&y)));
    }
}
