//! Top-K ranking with train-item masking, Recall@K / NDCG@K, and a
//! popularity baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{InteractionDataset, Split};
use crate::linalg::{dot, CsrMatrix};
use crate::model::{forward, HyperParams, ModelError, ModelState, Mode};
use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no users with {0} interactions to evaluate")]
    NoEvaluableUsers(Split),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean metrics over evaluated users, keyed by cutoff.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub users_evaluated: usize,
}

impl EvalResult {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }

    /// `recall@K=<x> ndcg@K=<y> ... users=<n>`
    pub fn metrics_line(&self) -> String {
        let mut s = String::new();
        for (k, r) in &self.recall {
            let _ = write!(s, "recall@{k}={r:.6} ndcg@{k}={:.6} ", self.ndcg[k]);
        }
        let _ = write!(s, "users={}", self.users_evaluated);
        s
    }

    /// `eval epoch=<e> recall@K=<x> ndcg@K=<y> ... users=<n>`
    pub fn log_line(&self, epoch: usize) -> String {
        format!("eval epoch={epoch} {}", self.metrics_line())
    }

    /// Aligned text table, one row per cutoff.
    pub fn table(&self) -> String {
        let mut s = format!("{:>6}  {:>10}  {:>10}\n", "K", "Recall@K", "NDCG@K");
        for (k, r) in &self.recall {
            let _ = writeln!(s, "{:>6}  {:>10.6}  {:>10.6}", k, r, self.ndcg[k]);
        }
        let _ = writeln!(s, "users evaluated: {}", self.users_evaluated);
        s
    }
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top-`k` unmasked items by descending score, ties to the lower index.
/// `masked` must be sorted.
pub fn rank_items(scores: &[f64], masked: &[usize], k: usize) -> Result<Vec<usize>, EvalError> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|i| masked.binary_search(i).is_err()).collect();
    if k > candidates.len() {
        return Err(EvalError::InvalidArgument(format!(
            "cutoff {k} exceeds {} unmasked items",
            candidates.len()
        )));
    }
    let cmp = by_score_then_index(scores);
    if k > 0 && k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, &cmp);
    }
    candidates.truncate(k);
    candidates.sort_unstable_by(&cmp);
    Ok(candidates)
}

/// `|top-k ∩ relevant| / |relevant|`; `relevant` must be sorted and non-empty.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|i| relevant.binary_search(i).is_ok()).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with `1 / log2(pos + 2)` gains; `relevant` sorted.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len())).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Averages metrics over users with at least one `split` interaction.
///
/// `rank(user, masked, k)` must return that user's top-`k` list with
/// `masked` (their train items) excluded. Cutoffs larger than a user's
/// candidate pool are clamped.
pub fn evaluate_rankings<F>(ds: &InteractionDataset, split: Split, ks: &[usize], mut rank: F) -> Result<EvalResult, EvalError>
where
    F: FnMut(usize, &[usize], usize) -> Result<Vec<usize>, EvalError>,
{
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidArgument("cutoffs must be non-empty and >= 1".into()));
    }
    let k_max = *ks.iter().max().unwrap();
    let train = ds.items_by_user(Split::Train);
    let target = ds.items_by_user(split);
    let mut recall_sum: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_sum = recall_sum.clone();
    let mut users = 0usize;
    for u in 0..ds.num_users() {
        let relevant = target.items(u);
        if relevant.is_empty() {
            continue;
        }
        let masked = train.items(u);
        let available = ds.num_items() - masked.len();
        let ranked = rank(u, masked, k_max.min(available))?;
        for &k in ks {
            *recall_sum.get_mut(&k).unwrap() += recall_at_k(&ranked, relevant, k);
            *ndcg_sum.get_mut(&k).unwrap() += ndcg_at_k(&ranked, relevant, k);
        }
        users += 1;
    }
    if users == 0 {
        return Err(EvalError::NoEvaluableUsers(split));
    }
    let mean = |m: BTreeMap<usize, f64>| m.into_iter().map(|(k, v)| (k, v / users as f64)).collect();
    Ok(EvalResult { recall: mean(recall_sum), ndcg: mean(ndcg_sum), users_evaluated: users })
}

/// Eval-mode forward once, then full ranking per user.
pub fn evaluate(
    state: &ModelState,
    a_norm: &CsrMatrix,
    ds: &InteractionDataset,
    split: Split,
    ks: &[usize],
) -> Result<EvalResult, EvalError> {
    let mut unused = SplitMix64::seed_from(0);
    let hp = HyperParams { layers: state.layers, embed_dim: state.embed_dim(), ..HyperParams::default() };
    let trace = forward(state, a_norm, None, &hp, Mode::Eval, &mut unused)?;
    let mut scores = vec![0.0; ds.num_items()];
    evaluate_rankings(ds, split, ks, |u, masked, k| {
        let eu = trace.final_user.row(u);
        for (q, s) in scores.iter_mut().enumerate() {
            *s = dot(eu, trace.final_item.row(q));
        }
        rank_items(&scores, masked, k)
    })
}

/// Ranks items by training interaction count, descending, ties by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityBaseline {
    order: Vec<usize>,
}

impl PopularityBaseline {
    pub fn new(ds: &InteractionDataset) -> Self {
        let mut counts = vec![0usize; ds.num_items()];
        for &(_, i) in ds.train() {
            counts[i] += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn from_counts(counts: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        Self { order }
    }

    pub fn global_order(&self) -> &[usize] {
        &self.order
    }

    /// Lazily yields the global order with `masked` (sorted) removed.
    pub fn ranked_for<'a>(&'a self, masked: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
        self.order.iter().copied().filter(move |i| masked.binary_search(i).is_err())
    }

    pub fn evaluate(&self, ds: &InteractionDataset, split: Split, ks: &[usize]) -> Result<EvalResult, EvalError> {
        evaluate_rankings(ds, split, ks, |_, masked, k| Ok(self.ranked_for(masked).take(k).collect()))
    }
}
