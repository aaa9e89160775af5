//! Interaction ingestion, train/validation/test splits, and the bipartite
//! adjacency matrices built from the training split.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::linalg::CsrMatrix;
use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        })
    }
}

/// Users, items and the three interaction splits, all in dense indices.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    train: Vec<(usize, usize)>,
    validation: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
}

impl InteractionDataset {
    /// Builds a dataset directly from dense indices; external ids are the
    /// decimal indices. Checks every dataset invariant.
    pub fn from_indices(
        num_users: usize,
        num_items: usize,
        train: Vec<(usize, usize)>,
        validation: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
    ) -> Result<Self, DataError> {
        let user_ids: Vec<String> = (0..num_users).map(|u| u.to_string()).collect();
        let item_ids: Vec<String> = (0..num_items).map(|i| i.to_string()).collect();
        let ds = Self {
            user_index: index_map(&user_ids),
            item_index: index_map(&item_ids),
            user_ids,
            item_ids,
            train,
            validation,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn train(&self) -> &[(usize, usize)] {
        &self.train
    }

    pub fn validation(&self) -> &[(usize, usize)] {
        &self.validation
    }

    pub fn test(&self) -> &[(usize, usize)] {
        &self.test
    }

    pub fn split(&self, split: Split) -> &[(usize, usize)] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    /// Per-user sorted item lists for one split.
    pub fn items_by_user(&self, split: Split) -> UserItems {
        UserItems::new(self.num_users(), self.split(split))
    }

    /// `dataset M=.. N=.. train=.. val=.. test=..`
    pub fn summary_line(&self) -> String {
        format!(
            "dataset M={} N={} train={} val={} test={}",
            self.num_users(),
            self.num_items(),
            self.train.len(),
            self.validation.len(),
            self.test.len()
        )
    }

    /// Writes one split as `<user_id>\t<item_id>` lines using external ids.
    pub fn write_split(&self, split: Split, path: &Path) -> Result<(), DataError> {
        let pairs: Vec<(String, String)> = self
            .split(split)
            .iter()
            .map(|&(u, i)| (self.user_ids[u].clone(), self.item_ids[i].clone()))
            .collect();
        write_pairs(path, &pairs)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (m, n) = (self.num_users(), self.num_items());
        let mut sets: Vec<HashSet<(usize, usize)>> = Vec::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let mut seen = HashSet::new();
            for &(u, i) in self.split(split) {
                if u >= m || i >= n {
                    return Err(DataError::Invariant(format!("{split} pair ({u}, {i}) outside {m}x{n}")));
                }
                if !seen.insert((u, i)) {
                    return Err(DataError::Invariant(format!("duplicate {split} pair ({u}, {i})")));
                }
            }
            sets.push(seen);
        }
        for (k, split) in [(1, Split::Validation), (2, Split::Test)] {
            if let Some(p) = sets[k].iter().find(|p| sets[0].contains(p)) {
                return Err(DataError::Protocol(format!("pair {p:?} appears in both train and {split}")));
            }
        }
        let train_users: HashSet<usize> = self.train.iter().map(|p| p.0).collect();
        let cold: Vec<usize> = sorted_unique(self.test.iter().map(|p| p.0).filter(|u| !train_users.contains(u)));
        if !cold.is_empty() {
            return Err(DataError::Protocol(format!("test users without train interactions: {cold:?}")));
        }
        Ok(())
    }
}

fn index_map(ids: &[String]) -> HashMap<String, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
}

fn sorted_unique<T: Ord>(it: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = it.collect();
    v.sort();
    v.dedup();
    v
}

/// Per-user sorted item lists with membership lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct UserItems {
    by_user: Vec<Vec<usize>>,
}

impl UserItems {
    pub fn new(num_users: usize, pairs: &[(usize, usize)]) -> Self {
        let mut by_user = vec![Vec::new(); num_users];
        for &(u, i) in pairs {
            by_user[u].push(i);
        }
        for items in &mut by_user {
            items.sort_unstable();
            items.dedup();
        }
        Self { by_user }
    }

    pub fn items(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.by_user[user].binary_search(&item).is_ok()
    }

    pub fn num_users(&self) -> usize {
        self.by_user.len()
    }
}

/// Held-out validation settings used when no validation file is supplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutOptions {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for HoldoutOptions {
    fn default() -> Self {
        Self { val_fraction: 0.1, seed: 0 }
    }
}

/// Reads a pair file: whitespace-separated `<user> <item>` per line, extra
/// columns ignored, blank and `#` lines skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        match (fields.next(), fields.next()) {
            (Some(u), Some(i)) => out.push((u.to_string(), i.to_string())),
            _ => {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected `<user> <item>`, got {line:?}"),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::new();
    for (u, i) in pairs {
        writeln!(buf, "{u}\t{i}").map_err(io_err)?;
    }
    fs::write(path, buf).map_err(io_err)
}

/// Loads train/validation/test pair files into dense indices.
///
/// Indices follow first appearance in the train file. Validation and test
/// pairs must reference users and items seen in train, and must not repeat
/// a train pair. Without a validation file, `holdout` moves a seeded
/// per-user fraction of train pairs into validation.
pub fn load_interactions(
    train_path: &Path,
    val_path: Option<&Path>,
    test_path: &Path,
    holdout: HoldoutOptions,
) -> Result<InteractionDataset, DataError> {
    let train_raw = read_pairs(train_path)?;
    let val_raw = val_path.map(read_pairs).transpose()?;
    let test_raw = read_pairs(test_path)?;

    let mut user_ids: Vec<String> = Vec::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut train = Vec::new();
    let mut train_set = HashSet::new();
    for (u, i) in &train_raw {
        let ui = *user_index.entry(u.clone()).or_insert_with(|| {
            user_ids.push(u.clone());
            user_ids.len() - 1
        });
        let ii = *item_index.entry(i.clone()).or_insert_with(|| {
            item_ids.push(i.clone());
            item_ids.len() - 1
        });
        if train_set.insert((ui, ii)) {
            train.push((ui, ii));
        }
    }

    let resolve = |raw: &[(String, String)], split: Split| -> Result<Vec<(usize, usize)>, DataError> {
        let mut missing_users = Vec::new();
        let mut missing_items = Vec::new();
        let mut leaked = Vec::new();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (u, i) in raw {
            let (ui, ii) = (user_index.get(u), item_index.get(i));
            if ui.is_none() {
                missing_users.push(u.clone());
            }
            if ii.is_none() {
                missing_items.push(i.clone());
            }
            let (Some(&ui), Some(&ii)) = (ui, ii) else { continue };
            if train_set.contains(&(ui, ii)) {
                leaked.push(format!("({u}, {i})"));
            } else if seen.insert((ui, ii)) {
                out.push((ui, ii));
            }
        }
        let mut problems = Vec::new();
        if !missing_users.is_empty() {
            problems.push(format!("{split} users absent from train: {}", sorted_unique(missing_users.into_iter()).join(", ")));
        }
        if !missing_items.is_empty() {
            problems.push(format!("{split} items absent from train: {}", sorted_unique(missing_items.into_iter()).join(", ")));
        }
        if !leaked.is_empty() {
            problems.push(format!("{split} pairs also in train: {}", leaked.join(", ")));
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(DataError::Protocol(problems.join("; ")))
        }
    };

    let test = resolve(&test_raw, Split::Test)?;
    let validation = match &val_raw {
        Some(raw) => resolve(raw, Split::Validation)?,
        None => {
            let (kept, held) = hold_out(&train, user_ids.len(), item_ids.len(), holdout);
            train = kept;
            held
        }
    };

    let ds = InteractionDataset { user_ids, item_ids, user_index, item_index, train, validation, test };
    ds.validate()?;
    Ok(ds)
}

/// Moves `round(fraction * n_u)` of each user's pairs to a held-out list,
/// leaving every user and every item at least one remaining pair.
fn hold_out(
    pairs: &[(usize, usize)],
    num_users: usize,
    num_items: usize,
    opts: HoldoutOptions,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut rng = SplitMix64::seed_from(opts.seed);
    let mut item_count = vec![0usize; num_items];
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        per_user[u].push(i);
        item_count[i] += 1;
    }
    let mut held = HashSet::new();
    let mut held_list = Vec::new();
    for (u, items) in per_user.iter().enumerate() {
        let want = ((opts.val_fraction * items.len() as f64).round() as usize).min(items.len().saturating_sub(1));
        let mut order = items.clone();
        order.shuffle(&mut rng);
        let mut taken = 0;
        for i in order {
            if taken == want {
                break;
            }
            if item_count[i] > 1 {
                item_count[i] -= 1;
                held.insert((u, i));
                held_list.push((u, i));
                taken += 1;
            }
        }
    }
    let kept = pairs.iter().copied().filter(|p| !held.contains(p)).collect();
    (kept, held_list)
}

/// Pairs of external ids for the three splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitPairs {
    pub train: Vec<(String, String)>,
    pub validation: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

/// Per-user random split of raw interactions.
///
/// Each user's distinct items are shuffled; `round(test_fraction * n)` go to
/// test and `round(val_fraction * n)` to validation, keeping at least one
/// train item. An item left without any train pair gets one of its held-out
/// pairs moved back to train so that loading succeeds.
pub fn stratified_split(
    pairs: &[(String, String)],
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> SplitPairs {
    let mut rng = SplitMix64::seed_from(seed);
    let mut users: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut seen = HashSet::new();
    for (u, i) in pairs {
        if !seen.insert((u.as_str(), i.as_str())) {
            continue;
        }
        per_user
            .entry(u.as_str())
            .or_insert_with(|| {
                users.push(u.as_str());
                Vec::new()
            })
            .push(i.as_str());
    }

    let mut out = SplitPairs::default();
    let mut train_items: HashSet<&str> = HashSet::new();
    let mut held: Vec<(bool, &str, &str)> = Vec::new();
    for &u in &users {
        let mut items = per_user[u].clone();
        items.shuffle(&mut rng);
        let n = items.len();
        let n_test = ((test_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        let n_val = ((val_fraction * n as f64).round() as usize).min(n - 1 - n_test);
        for (pos, &i) in items.iter().enumerate() {
            if pos < n_test {
                held.push((true, u, i));
            } else if pos < n_test + n_val {
                held.push((false, u, i));
            } else {
                train_items.insert(i);
                out.train.push((u.to_string(), i.to_string()));
            }
        }
    }
    for (is_test, u, i) in held {
        let pair = (u.to_string(), i.to_string());
        if train_items.insert(i) {
            out.train.push(pair);
        } else if is_test {
            out.test.push(pair);
        } else {
            out.validation.push(pair);
        }
    }
    out
}

/// Binary `M×N` matrix of training interactions.
pub fn build_adjacency(ds: &InteractionDataset) -> CsrMatrix {
    let triplets: Vec<(usize, usize, f64)> = ds.train().iter().map(|&(u, i)| (u, i, 1.0)).collect();
    CsrMatrix::from_triplets(ds.num_users(), ds.num_items(), &triplets).expect("dataset invariants hold")
}

/// Symmetric degree normalization `D_u^{-1/2} A D_i^{-1/2}` of a binary matrix.
pub fn normalize_adjacency(a: &CsrMatrix) -> Result<CsrMatrix, DataError> {
    if a.values().iter().any(|&v| v != 1.0) {
        return Err(DataError::Invariant("normalize_adjacency expects a binary matrix".into()));
    }
    let du = a.row_degrees();
    let di = a.col_degrees();
    let mut values = Vec::with_capacity(a.nnz());
    for u in 0..a.rows() {
        let (cols, _) = a.row(u);
        for &i in cols {
            if du[u] == 0 || di[i] == 0 {
                return Err(DataError::Invariant(format!("zero degree at ({u}, {i})")));
            }
            values.push(1.0 / ((du[u] * di[i]) as f64).sqrt());
        }
    }
    a.with_values(values).map_err(|e| DataError::Invariant(e.to_string()))
}
