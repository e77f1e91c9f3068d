//! Leave-one-out splits for next-item prediction and seeded user-level
//! fraction splits for downstream tasks.

use crate::error::{ensure, PclError, Result};
use crate::rng::{tag, Rng};

/// One ranking instance: predict `target` from `input`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkExample {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LooSplit {
    /// Training sequences `items[..L-2]` with their user index.
    pub train: Vec<(usize, Vec<usize>)>,
    /// Input `items[..L-2]`, target `items[L-2]`.
    pub val: Vec<LinkExample>,
    /// Input `items[..L-1]`, target `items[L-1]`.
    pub test: Vec<LinkExample>,
    /// Users dropped for having fewer than 3 items (lenient mode).
    pub dropped: Vec<usize>,
}

/// Leave-one-out over every user's sequence. Users with fewer than three
/// items are a data error when `strict`, otherwise dropped.
pub fn leave_one_out(sequences: &[Vec<usize>], strict: bool) -> Result<LooSplit> {
    let mut out = LooSplit::default();
    for (u, s) in sequences.iter().enumerate() {
        let l = s.len();
        if l < 3 {
            ensure!(!strict, Data, "user {u} has {l} interactions; leave-one-out needs 3");
            out.dropped.push(u);
            continue;
        }
        out.train.push((u, s[..l - 2].to_vec()));
        out.val.push(LinkExample { user: u, input: s[..l - 2].to_vec(), target: s[l - 2] });
        out.test.push(LinkExample { user: u, input: s[..l - 1].to_vec(), target: s[l - 1] });
    }
    ensure!(!out.train.is_empty(), Data, "no user is long enough for leave-one-out");
    Ok(out)
}

/// Disjoint, exhaustive partition of user indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..users`, cut at `round(train·U)` and
/// `round(val·U)`; the test set takes the remainder. Each part is returned
/// in ascending user order.
pub fn fraction_split(users: usize, train: f64, val: f64, seed: u64, task: usize) -> Result<UserSplit> {
    ensure!(
        train > 0.0 && val >= 0.0 && train + val < 1.0,
        Config,
        "split fractions train={train} val={val} leave no test users"
    );
    ensure!(users >= 3, Data, "need at least 3 users to split, got {users}");
    let mut order: Vec<usize> = (0..users).collect();
    Rng::derived(seed, tag("split") ^ task as u64).shuffle(&mut order);
    let n_train = ((train * users as f64).round() as usize).clamp(1, users - 2);
    let n_val = ((val * users as f64).round() as usize).clamp(1, users - n_train - 1);
    let mut parts =
        [order[..n_train].to_vec(), order[n_train..n_train + n_val].to_vec(), order[n_train + n_val..].to_vec()];
    parts.iter_mut().for_each(|p| p.sort_unstable());
    let [train, val, test] = parts;
    if train.is_empty() || test.is_empty() {
        return Err(PclError::Data("split produced an empty part".into()));
    }
    Ok(UserSplit { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leave_one_out_definition() {
        let s = leave_one_out(&[vec![1, 2, 3]], true).unwrap();
        assert_eq!(s.train, vec![(0, vec![1])]);
        assert_eq!(s.val[0], LinkExample { user: 0, input: vec![1], target: 2 });
        assert_eq!(s.test[0], LinkExample { user: 0, input: vec![1, 2], target: 3 });
    }

    #[test]
    fn short_users_strict_and_lenient() {
        let seqs = vec![vec![1, 2, 3, 4], vec![5, 6]];
        assert!(matches!(leave_one_out(&seqs, true), Err(PclError::Data(_))));
        let s = leave_one_out(&seqs, false).unwrap();
        assert_eq!(s.dropped, vec![1]);
        assert_eq!(s.test.len(), 1);
    }

    proptest! {
        #[test]
        fn fraction_split_partitions(users in 3usize..400, seed in any::<u64>()) {
            let s = fraction_split(users, 0.8, 0.1, seed, 2).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..users).collect::<Vec<_>>());
            if users >= 20 {
                prop_assert!((s.train.len() as f64 - 0.8 * users as f64).abs() <= 1.0);
                prop_assert!((s.val.len() as f64 - 0.1 * users as f64).abs() <= 1.0);
                prop_assert!((s.test.len() as f64 - 0.1 * users as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn fraction_split_is_seeded_per_task() {
        let a = fraction_split(100, 0.8, 0.1, 7, 2).unwrap();
        assert_eq!(a, fraction_split(100, 0.8, 0.1, 7, 2).unwrap());
        assert_ne!(a, fraction_split(100, 0.8, 0.1, 7, 3).unwrap());
    }
}
