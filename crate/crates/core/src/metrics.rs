//! Hit ratio under all-ranking and batch-ranking, accuracy, and metric rows.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{tag, Rng};
use crate::tensor::graph::dot;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum RankingProtocol {
    /// Target against every item except the user's history.
    All,
    /// Target against `negatives` sampled items outside the history.
    Batch { negatives: usize, seed: u64 },
}

impl Default for RankingProtocol {
    fn default() -> Self {
        RankingProtocol::Batch { negatives: 100, seed: 0 }
    }
}

impl RankingProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            RankingProtocol::All => "all",
            RankingProtocol::Batch { .. } => "batch",
        }
    }
}

/// `1 + #{score > s_t} + #{score == s_t and id < target}`.
pub fn rank_of(target: usize, target_score: f32, scored: impl IntoIterator<Item = (usize, f32)>) -> usize {
    1 + scored
        .into_iter()
        .filter(|&(id, s)| id != target && (s > target_score || (s == target_score && id < target)))
        .count()
}

/// Candidate items other than the target for one user.
pub fn negatives_for(
    protocol: RankingProtocol,
    num_items: usize,
    target: usize,
    history: &[usize],
    user: usize,
) -> Result<Vec<usize>> {
    let excluded: HashSet<usize> = history.iter().copied().chain([target]).collect();
    match protocol {
        RankingProtocol::All => Ok((1..=num_items).filter(|i| !excluded.contains(i)).collect()),
        RankingProtocol::Batch { negatives, seed } => {
            ensure!(negatives >= 1, Config, "batch ranking needs at least one negative");
            let pool = num_items - excluded.iter().filter(|&&i| (1..=num_items).contains(&i)).count();
            let want = negatives.min(pool);
            let mut rng = Rng::derived(seed, tag("batch-ranking") ^ user as u64);
            let mut picked = HashSet::with_capacity(want);
            let mut out = Vec::with_capacity(want);
            while out.len() < want {
                let c = 1 + rng.below(num_items);
                if !excluded.contains(&c) && picked.insert(c) {
                    out.push(c);
                }
            }
            Ok(out)
        }
    }
}

/// Ranks of each user's target against the item table rows.
pub fn target_ranks(
    table: &Tensor,
    latents: &[Vec<f32>],
    targets: &[usize],
    histories: &[&[usize]],
    users: &[usize],
    protocol: RankingProtocol,
) -> Result<Vec<usize>> {
    ensure!(
        latents.len() == targets.len() && targets.len() == histories.len() && users.len() == targets.len(),
        Dimension,
        "ranking inputs disagree in length"
    );
    let num_items = table.rows() - 1;
    let mut ranks = Vec::with_capacity(targets.len());
    for i in 0..targets.len() {
        let t = targets[i];
        ensure!((1..=num_items).contains(&t), Index, "target {t} outside 1..={num_items}");
        let negs = negatives_for(protocol, num_items, t, histories[i], users[i])?;
        let st = dot(&latents[i], table.row(t));
        ranks.push(rank_of(t, st, negs.iter().map(|&c| (c, dot(&latents[i], table.row(c))))));
    }
    Ok(ranks)
}

/// Candidate count seen by one user (target included).
pub fn candidate_count(protocol: RankingProtocol, num_items: usize, target: usize, history: &[usize]) -> usize {
    let excluded: HashSet<usize> = history.iter().copied().chain([target]).collect();
    let pool = num_items - excluded.len();
    1 + match protocol {
        RankingProtocol::All => pool,
        RankingProtocol::Batch { negatives, .. } => negatives.min(pool),
    }
}

/// Fraction of ranks `<= k`. `candidates` is the smallest candidate count
/// among the users; `k` above it is a contract error.
pub fn hit_ratio(ranks: &[usize], k: usize, candidates: usize) -> Result<f64> {
    ensure!(k >= 1, Contract, "K must be at least 1");
    ensure!(k <= candidates, Contract, "K={k} exceeds the {candidates} candidates");
    ensure!(!ranks.is_empty(), Contract, "hit ratio over no users");
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Argmax with the lowest index winning ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &[Vec<f32>], labels: &[usize], classes: usize) -> Result<f64> {
    ensure!(logits.len() == labels.len(), Dimension, "{} logit rows for {} labels", logits.len(), labels.len());
    ensure!(!labels.is_empty(), Contract, "accuracy over no users");
    for row in logits {
        ensure!(row.len() == classes, Dimension, "logit width {} for {classes} classes", row.len());
    }
    let hits = logits.iter().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: usize,
    pub metric: String,
    pub protocol: String,
    pub value: f64,
    pub order_index: usize,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str = "task,metric,protocol,value,order_index";
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.task, self.metric, self.protocol, self.value, self.order_index)
    }
}

pub fn to_csv(rows: &[MetricRecord]) -> String {
    let mut s = String::from(MetricRecord::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

/// Parses rows written by [`to_csv`].
pub fn from_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad =
            || crate::PclError::Parse { file: "metrics.csv".into(), line: i + 1, msg: format!("bad row `{line}`") };
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(MetricRecord {
            task: f[0].parse().map_err(|_| bad())?,
            metric: f[1].to_string(),
            protocol: f[2].to_string(),
            value: f[3].parse().map_err(|_| bad())?,
            order_index: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle: sort candidates by (score desc, id asc).
    fn sort_rank(target: usize, scored: &[(usize, f32)]) -> usize {
        let mut v = scored.to_vec();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        1 + v.iter().position(|&(id, _)| id == target).unwrap()
    }

    #[test]
    fn counting_examples() {
        assert_eq!(hit_ratio(&[1, 7, 3], 5, 10).unwrap(), 2.0 / 3.0);
        assert_eq!(hit_ratio(&[1], 1, 1).unwrap(), 1.0);
        assert!(hit_ratio(&[1], 2, 1).is_err());
        assert_eq!(rank_of(5, 1.0, [(2, 1.0), (7, 1.0), (3, 2.0)]), 3);
    }

    #[test]
    fn accuracy_examples() {
        let one_hot: Vec<Vec<f32>> =
            [0, 2, 1].iter().map(|&y| (0..3).map(|c| (c == y) as u8 as f32).collect()).collect();
        assert_eq!(accuracy(&one_hot, &[0, 2, 1], 3).unwrap(), 1.0);
        let flat = vec![vec![0.5; 3]; 4];
        assert_eq!(accuracy(&flat, &[0, 1, 0, 2], 3).unwrap(), 0.5);
        assert!(matches!(accuracy(&flat, &[0, 1, 0, 2], 4), Err(crate::PclError::Dimension(_))));
    }

    #[test]
    fn random_logits_near_chance() {
        let mut rng = crate::rng::Rng::new(42);
        let logits: Vec<Vec<f32>> = (0..1000).map(|_| rng.normal_vec(10, 1.0)).collect();
        let labels: Vec<usize> = (0..1000).map(|_| rng.below(10)).collect();
        let acc = accuracy(&logits, &labels, 10).unwrap();
        assert!((acc - 0.1).abs() <= 0.03, "{acc}");
    }

    #[test]
    fn batch_negatives_exclude_history_and_target() {
        let p = RankingProtocol::Batch { negatives: 100, seed: 3 };
        let negs = negatives_for(p, 300, 7, &[1, 2, 3], 0).unwrap();
        assert_eq!(negs.len(), 100);
        assert_eq!(negs.iter().collect::<HashSet<_>>().len(), 100);
        assert!(negs.iter().all(|&c| ![1, 2, 3, 7].contains(&c)));
        assert_eq!(negs, negatives_for(p, 300, 7, &[1, 2, 3], 0).unwrap());
        // Small catalogs are exhausted rather than oversampled.
        assert_eq!(negatives_for(p, 10, 7, &[1], 0).unwrap().len(), 8);
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(scores in prop::collection::vec(-3i32..3, 2..40), t in 0usize..40) {
            let scored: Vec<(usize, f32)> = scores.iter().enumerate().map(|(i, &s)| (i + 1, s as f32)).collect();
            let t = 1 + t % scored.len();
            let st = scored[t - 1].1;
            prop_assert_eq!(rank_of(t, st, scored.iter().copied()), sort_rank(t, &scored));
        }

        #[test]
        fn monotone_transform_keeps_ranks(scores in prop::collection::vec(-5.0f32..5.0, 2..30), t in 0usize..30) {
            let t = 1 + t % scores.len();
            let a: Vec<(usize, f32)> = scores.iter().enumerate().map(|(i, &s)| (i + 1, s)).collect();
            let b: Vec<(usize, f32)> = a.iter().map(|&(i, s)| (i, 2.0 * s + 1.0)).collect();
            prop_assert_eq!(rank_of(t, a[t - 1].1, a.iter().copied()), rank_of(t, b[t - 1].1, b.iter().copied()));
        }

        #[test]
        fn hit_ratio_monotone_in_k(ranks in prop::collection::vec(1usize..50, 1..30)) {
            let mut prev = 0.0;
            for k in 1..=50 {
                let h = hit_ratio(&ranks, k, 50).unwrap();
                prop_assert!(h >= prev);
                prev = h;
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows =
            vec![MetricRecord { task: 2, metric: "acc".into(), protocol: "-".into(), value: 0.25, order_index: 1 }];
        assert_eq!(from_csv(&to_csv(&rows)).unwrap(), rows);
    }
}
