//! Behavior sequences, per-task labels, and their on-disk text format.
//!
//! A dataset directory holds:
//!
//! * `manifest`: TOML with one `[[task]]` table per task (`id`, `kind`,
//!   `metric`, `labels`, `adapter`, `attributes`, and a `[task.description]`
//!   table with `name`, `input`, `output`, `metric`). Task 1 may be omitted;
//!   the standard next-item task is then assumed.
//! * `items` (optional): one raw item id per line, optionally followed by a
//!   tab and a positive integer attribute. Fixes the dense id order.
//! * `sequences`: `user<TAB>i1,i2,...`, oldest interaction first.
//! * `task{k}.labels` for every downstream task: `user<TAB>label`, where the
//!   label is a class index or a raw item id.
//!
//! Blank lines and lines starting with `#` are ignored.

pub mod split;
pub mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, PclError, Result};
use crate::task::{TaskKind, TaskSpec, PRETRAIN_TASK};

pub use split::{fraction_split, leave_one_out, LinkExample, LooSplit, UserSplit};
pub use synth::{Rule, SynthTask, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// Raw id of dense item `i` at index `i - 1`.
    pub items: Vec<String>,
    /// Attribute of dense item `i` at index `i` (index 0 is padding); 0 means
    /// no attribute.
    pub item_attrs: Option<Vec<usize>>,
    pub num_attrs: usize,
    pub users: Vec<String>,
    /// Dense item ids per user, oldest first.
    pub sequences: Vec<Vec<usize>>,
    /// Pretraining task first, then downstream tasks by id.
    pub tasks: Vec<TaskSpec>,
    /// One label per user for each downstream task: class index, or dense
    /// item id for link tasks.
    pub labels: BTreeMap<usize, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(rename = "task", default)]
    tasks: Vec<TaskSpec>,
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| PclError::io(path, e))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> PclError {
    PclError::Parse { file: file.to_string(), line, msg: msg.into() }
}

fn split_tab<'a>(file: &str, line: usize, l: &'a str) -> Result<(&'a str, &'a str)> {
    let (a, b) = l.split_once('\t').ok_or_else(|| parse_err(file, line, "expected two tab-separated fields"))?;
    if a.is_empty() {
        return Err(parse_err(file, line, "empty user id"));
    }
    Ok((a, b.trim()))
}

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn task(&self, id: usize) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn downstream_ids(&self) -> Vec<usize> {
        self.tasks.iter().filter(|t| !t.is_pretrain()).map(|t| t.id).collect()
    }

    /// Attribute ids of a padded id sequence (0 for padding).
    pub fn attr_ids(&self, ids: &[usize]) -> Vec<usize> {
        match &self.item_attrs {
            Some(a) => ids.iter().map(|&i| a[i]).collect(),
            None => vec![0; ids.len()],
        }
    }

    /// Checks dense ids, label ranges and task consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.items.len();
        ensure!(n >= 1, Data, "dataset has no items");
        ensure!(self.users.len() == self.sequences.len(), Data, "user/sequence count mismatch");
        let mut seen = HashSet::new();
        for u in &self.users {
            ensure!(seen.insert(u.as_str()), Data, "duplicate user `{u}`");
        }
        for (u, s) in self.users.iter().zip(&self.sequences) {
            ensure!(!s.is_empty(), Data, "user `{u}` has an empty sequence");
            ensure!(s.iter().all(|&i| (1..=n).contains(&i)), Data, "user `{u}` has an item outside 1..={n}");
        }
        if let Some(a) = &self.item_attrs {
            ensure!(a.len() == n + 1 && a[0] == 0, Data, "attribute table must cover every item");
            ensure!(a.iter().all(|&x| x <= self.num_attrs), Data, "attribute above declared count");
        }
        ensure!(
            self.tasks.first().map(TaskSpec::is_pretrain) == Some(true),
            Data,
            "task list must start with the pretraining task"
        );
        let mut ids = HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            ensure!(ids.insert(t.id), Data, "duplicate task id {}", t.id);
            if t.is_pretrain() {
                continue;
            }
            if t.attributes {
                ensure!(self.item_attrs.is_some(), Data, "task {} uses attributes but items carry none", t.id);
            }
            let labels =
                self.labels.get(&t.id).ok_or_else(|| PclError::Data(format!("no labels for task {}", t.id)))?;
            ensure!(
                labels.len() == self.users.len(),
                Data,
                "task {} has {} labels for {} users",
                t.id,
                labels.len(),
                self.users.len()
            );
            let ok = match t.kind {
                TaskKind::Classification => labels.iter().all(|&y| y < t.labels),
                TaskKind::Link => labels.iter().all(|&y| (1..=n).contains(&y)),
            };
            ensure!(ok, Data, "task {} has a label outside its range", t.id);
        }
        ensure!(self.labels.keys().all(|k| ids.contains(k)), Data, "labels for an undeclared task");
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        ensure!(dir.is_dir(), Config, "dataset directory {} does not exist", dir.display());
        let manifest: Manifest =
            toml::from_str(&read(dir, "manifest")?).map_err(|e| PclError::Config(format!("manifest: {e}")))?;
        let mut tasks = manifest.tasks;
        tasks.sort_by_key(|t| t.id);
        if tasks.first().map(|t| t.id) != Some(PRETRAIN_TASK) {
            tasks.insert(0, TaskSpec::pretrain());
        }

        let seq_text = read(dir, "sequences")?;
        let mut raw_seqs = Vec::new();
        for (line, l) in records(&seq_text) {
            let (user, rest) = split_tab("sequences", line, l)?;
            let items: Vec<&str> = rest.split(',').map(str::trim).collect();
            if items.iter().any(|s| s.is_empty()) {
                return Err(parse_err("sequences", line, "empty item id"));
            }
            raw_seqs.push((line, user.to_string(), items));
        }

        let mut attrs = None;
        let items: Vec<String> = if dir.join("items").exists() {
            let mut items = Vec::new();
            let mut a = vec![0usize];
            let mut any_attr = false;
            for (line, l) in records(&read(dir, "items")?) {
                let mut fields = l.split('\t');
                let id = fields.next().unwrap_or("").trim();
                if id.is_empty() {
                    return Err(parse_err("items", line, "empty item id"));
                }
                let attr = match fields.next() {
                    Some(x) => {
                        any_attr = true;
                        x.trim().parse::<usize>().ok().filter(|&v| v >= 1).ok_or_else(|| {
                            parse_err("items", line, format!("attribute `{x}` is not a positive integer"))
                        })?
                    }
                    None => 0,
                };
                items.push(id.to_string());
                a.push(attr);
            }
            if any_attr {
                attrs = Some(a);
            }
            items
        } else {
            let mut set: Vec<&str> =
                raw_seqs.iter().flat_map(|(_, _, s)| s.iter().copied()).collect::<HashSet<_>>().into_iter().collect();
            if set.iter().all(|s| s.parse::<u64>().is_ok()) {
                set.sort_by_key(|s| s.parse::<u64>().unwrap());
            } else {
                set.sort_unstable();
            }
            set.into_iter().map(String::from).collect()
        };
        let index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i + 1)).collect();
        ensure!(index.len() == items.len(), Data, "duplicate item ids in `items`");

        let mut users = Vec::with_capacity(raw_seqs.len());
        let mut sequences = Vec::with_capacity(raw_seqs.len());
        let mut user_index = HashMap::new();
        for (line, user, raw) in &raw_seqs {
            if user_index.insert(user.clone(), users.len()).is_some() {
                return Err(PclError::Data(format!("duplicate user `{user}` (sequences line {line})")));
            }
            let seq = raw
                .iter()
                .map(|s| {
                    index
                        .get(s)
                        .copied()
                        .ok_or_else(|| PclError::Data(format!("unknown item `{s}` (sequences line {line})")))
                })
                .collect::<Result<Vec<_>>>()?;
            users.push(user.clone());
            sequences.push(seq);
        }

        let mut labels = BTreeMap::new();
        for t in tasks.iter().filter(|t| !t.is_pretrain()) {
            let file = format!("task{}.labels", t.id);
            let mut ys: Vec<Option<usize>> = vec![None; users.len()];
            for (line, l) in records(&read(dir, &file)?) {
                let (user, y) = split_tab(&file, line, l)?;
                let u = *user_index
                    .get(user)
                    .ok_or_else(|| PclError::Data(format!("{file} line {line}: unknown user `{user}`")))?;
                let v = match t.kind {
                    TaskKind::Classification => y
                        .parse::<usize>()
                        .map_err(|_| parse_err(&file, line, format!("label `{y}` is not a class index")))?,
                    TaskKind::Link => *index
                        .get(y)
                        .ok_or_else(|| PclError::Data(format!("{file} line {line}: unknown item `{y}`")))?,
                };
                ensure!(ys[u].replace(v).is_none(), Data, "{file} line {line}: second label for user `{user}`");
            }
            let ys = ys
                .into_iter()
                .enumerate()
                .map(|(u, y)| y.ok_or_else(|| PclError::Data(format!("{file}: no label for user `{}`", users[u]))))
                .collect::<Result<Vec<_>>>()?;
            labels.insert(t.id, ys);
        }

        let num_attrs = attrs.as_ref().map_or(0, |a: &Vec<usize>| a.iter().copied().max().unwrap_or(0));
        let ds = Dataset { items, item_attrs: attrs, num_attrs, users, sequences, tasks, labels };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the dataset in the directory layout read by [`Dataset::load`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PclError::io(dir, e))?;
        for (name, text) in self.files()? {
            let path = dir.join(&name);
            fs::write(&path, text).map_err(|e| PclError::io(path, e))?;
        }
        Ok(())
    }

    /// File names and contents in a fixed order.
    pub fn files(&self) -> Result<Vec<(String, String)>> {
        let manifest = Manifest { tasks: self.tasks.clone() };
        let mut out =
            vec![("manifest".to_string(), toml::to_string(&manifest).map_err(|e| PclError::Config(e.to_string()))?)];
        let mut items = String::new();
        for (i, id) in self.items.iter().enumerate() {
            match &self.item_attrs {
                Some(a) if a[i + 1] > 0 => writeln!(items, "{id}\t{}", a[i + 1]).unwrap(),
                _ => writeln!(items, "{id}").unwrap(),
            }
        }
        out.push(("items".into(), items));
        let mut seqs = String::new();
        for (u, s) in self.users.iter().zip(&self.sequences) {
            let ids: Vec<&str> = s.iter().map(|&i| self.items[i - 1].as_str()).collect();
            writeln!(seqs, "{u}\t{}", ids.join(",")).unwrap();
        }
        out.push(("sequences".into(), seqs));
        for t in self.tasks.iter().filter(|t| !t.is_pretrain()) {
            let mut text = String::new();
            for (u, &y) in self.users.iter().zip(&self.labels[&t.id]) {
                match t.kind {
                    TaskKind::Classification => writeln!(text, "{u}\t{y}").unwrap(),
                    TaskKind::Link => writeln!(text, "{u}\t{}", self.items[y - 1]).unwrap(),
                }
            }
            out.push((format!("task{}.labels", t.id), text));
        }
        Ok(out)
    }

    /// Hex SHA-256 over the canonical file contents.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, text) in self.files()? {
            h.update(name.as_bytes());
            h.update([0]);
            h.update((text.len() as u64).to_le_bytes());
            h.update(text.as_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Keeps only the given users, in the given order.
    pub fn select_users(&self, keep: &[usize]) -> Dataset {
        let mut ds = self.clone();
        ds.users = keep.iter().map(|&u| self.users[u].clone()).collect();
        ds.sequences = keep.iter().map(|&u| self.sequences[u].clone()).collect();
        for (k, ys) in &self.labels {
            ds.labels.insert(*k, keep.iter().map(|&u| ys[u]).collect());
        }
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{AdapterShape, Metric, TaskDescription};

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn cls_manifest() -> &'static str {
        "[[task]]\nid = 2\nkind = \"classification\"\nmetric = \"acc\"\nlabels = 2\nadapter = \"linear\"\n\
         [task.description]\nname = \"gender\"\ninput = \"seq\"\noutput = \"class\"\nmetric = \"acc\"\n"
    }

    #[test]
    fn loads_and_reindexes() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest", cls_manifest());
        write(dir.path(), "sequences", "# header\nu1\t30,10,20\nu2\t20,20\n");
        write(dir.path(), "task2.labels", "u2\t1\nu1\t0\n");
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.items, ["10", "20", "30"]);
        assert_eq!(ds.sequences, vec![vec![3, 1, 2], vec![2, 2]]);
        assert_eq!(ds.labels[&2], vec![0, 1]);
        assert!(ds.tasks[0].is_pretrain());
    }

    #[test]
    fn pretrain_only_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest", "");
        write(dir.path(), "sequences", "a\t1,2,3\n");
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.tasks.len(), 1);
        assert!(ds.downstream_ids().is_empty());
    }

    #[test]
    fn rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest", "");
        write(dir.path(), "sequences", "a\t1,2\na\t3\n");
        assert!(matches!(Dataset::load(dir.path()), Err(PclError::Data(_))));

        write(dir.path(), "sequences", "a\t1,2\nb 3\n");
        match Dataset::load(dir.path()) {
            Err(PclError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        write(dir.path(), "items", "1\n2\n");
        write(dir.path(), "sequences", "a\t1,7\n");
        assert!(matches!(Dataset::load(dir.path()), Err(PclError::Data(_))));
    }

    #[test]
    fn label_user_mismatch_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "manifest", cls_manifest());
        write(dir.path(), "sequences", "u1\t1,2\nu2\t2\n");
        write(dir.path(), "task2.labels", "u1\t0\n");
        assert!(matches!(Dataset::load(dir.path()), Err(PclError::Data(_))));
        write(dir.path(), "task2.labels", "u1\t0\nu2\t1\nu3\t0\n");
        assert!(matches!(Dataset::load(dir.path()), Err(PclError::Data(_))));
        write(dir.path(), "task2.labels", "u1\t0\nu2\t5\n");
        assert!(matches!(Dataset::load(dir.path()), Err(PclError::Data(_))));
    }

    #[test]
    fn missing_directory_is_usage_error() {
        let err = Dataset::load(Path::new("/nonexistent/pcl-data")).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("/nonexistent/pcl-data"));
    }

    #[test]
    fn save_load_round_trip_with_link_task() {
        let ds = Dataset {
            items: vec!["a".into(), "b".into(), "c".into()],
            item_attrs: Some(vec![0, 1, 2, 1]),
            num_attrs: 2,
            users: vec!["x".into(), "y".into()],
            sequences: vec![vec![1, 2, 3], vec![3, 3]],
            tasks: vec![
                TaskSpec::pretrain(),
                TaskSpec {
                    id: 2,
                    kind: TaskKind::Link,
                    metric: Metric::HitRatio(5),
                    labels: 0,
                    adapter: AdapterShape::None,
                    attributes: true,
                    description: TaskDescription { name: "liked".into(), ..Default::default() },
                },
            ],
            labels: BTreeMap::from([(2, vec![2, 1])]),
        };
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.digest().unwrap(), ds.digest().unwrap());
    }
}
