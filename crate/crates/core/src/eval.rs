//! Full-ranking top-K evaluation.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint, ForwardOptions, PreparedStack};

pub const DEFAULT_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Validation,
    Test,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(Phase::Validation),
            "test" => Ok(Phase::Test),
            other => Err(Error::validation(format!("unknown phase {other:?}"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Validation => "validation",
            Phase::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub ndcg: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub relevant: usize,
    pub hits: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: String,
    pub seed: u64,
    pub phase: Phase,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub precision: f64,
    pub n_users_evaluated: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_user: Option<Vec<UserMetrics>>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "dataset,mode,seed,k,recall,ndcg,precision";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dataset, self.mode, self.seed, self.k, self.recall, self.ndcg, self.precision
        )
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
        let csv = format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row());
        fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            recall: self.recall,
            ndcg: self.ndcg,
            precision: self.precision,
        }
    }
}

fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top `k` items by inner product, ties to the smaller index. `excluded` is
/// indexed by item.
pub fn rank_scores(scores: &[f64], excluded: &[bool], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score of item {i} is not finite")));
    }
    let mut candidates: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| !excluded.get(i).copied().unwrap_or(false))
        .map(|(i, &s)| (s, i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::validation("every item is excluded"));
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, by_score_then_index);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(by_score_then_index);
    Ok(candidates.into_iter().map(|(_, i)| i).collect())
}

pub fn rank_topk(
    pooled: ArrayView2<'_, f64>,
    n_users: usize,
    user: usize,
    k: usize,
    exclude: &HashSet<usize>,
) -> Result<Vec<usize>> {
    let n_items = pooled.nrows().saturating_sub(n_users);
    if user >= n_users {
        return Err(Error::validation(format!("user {user} outside {n_users} users")));
    }
    let items = pooled.slice(ndarray::s![n_users.., ..]);
    let scores = items.dot(&pooled.row(user)).to_vec();
    let mut excluded = vec![false; n_items];
    for &i in exclude {
        if i >= n_items {
            return Err(Error::validation(format!("excluded item {i} outside {n_items} items")));
        }
        excluded[i] = true;
    }
    rank_scores(&scores, &excluded, k)
}

fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

pub fn metrics_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<Metrics> {
    if relevant.is_empty() {
        return Err(Error::validation("relevant set is empty"));
    }
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (p, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += discount(p + 1);
        }
    }
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Ok(Metrics {
        recall: hits as f64 / relevant.len() as f64,
        ndcg: dcg / idcg,
        precision: hits as f64 / k as f64,
    })
}

/// Relevance and exclusion sets per user for one phase.
pub fn phase_sets(split: &SplitDataset, phase: Phase) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut excluded = split.train.items_by_user();
    let relevant = match phase {
        Phase::Validation => split.validation.items_by_user(),
        Phase::Test => {
            for (u, items) in split.validation.items_by_user().into_iter().enumerate() {
                excluded[u].extend(items);
            }
            split.test.items_by_user()
        }
    };
    (relevant, excluded)
}

/// Averages metrics over users with a non-empty relevance set.
pub fn evaluate_pooled(
    pooled: ArrayView2<'_, f64>,
    split: &SplitDataset,
    phase: Phase,
    k: usize,
    keep_per_user: bool,
) -> Result<(Metrics, usize, Option<Vec<UserMetrics>>)> {
    let n_users = split.train.n_users;
    let n_items = split.train.n_items;
    if pooled.nrows() != n_users + n_items {
        return Err(Error::validation(format!(
            "embeddings have {} rows, split has {n_users} users + {n_items} items",
            pooled.nrows()
        )));
    }
    let (relevant, excluded) = phase_sets(split, phase);
    let items = pooled.slice(ndarray::s![n_users.., ..]);
    let per_user: Vec<UserMetrics> = (0..n_users)
        .into_par_iter()
        .filter(|&u| !relevant[u].is_empty())
        .map(|u| {
            let scores = items.dot(&pooled.row(u)).to_vec();
            let mut mask = vec![false; n_items];
            for &i in &excluded[u] {
                mask[i] = true;
            }
            let ranked = rank_scores(&scores, &mask, k)?;
            let rel: HashSet<usize> = relevant[u].iter().copied().collect();
            let metrics = metrics_at_k(&ranked, &rel, k)?;
            let hits = ranked.iter().filter(|i| rel.contains(i)).count();
            Ok(UserMetrics {
                user: u,
                relevant: rel.len(),
                hits,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let count = per_user.len();
    let mut sum = Metrics {
        recall: 0.0,
        ndcg: 0.0,
        precision: 0.0,
    };
    for m in &per_user {
        sum.recall += m.metrics.recall;
        sum.ndcg += m.metrics.ndcg;
        sum.precision += m.metrics.precision;
    }
    let denom = count.max(1) as f64;
    let mean = Metrics {
        recall: sum.recall / denom,
        ndcg: sum.ndcg / denom,
        precision: sum.precision / denom,
    };
    Ok((mean, count, keep_per_user.then_some(per_user)))
}

/// Noise-free forward pass from a checkpoint, then full ranking.
pub fn evaluate(
    checkpoint: &Checkpoint,
    prepared: &PreparedStack,
    split: &SplitDataset,
    k: usize,
    phase: Phase,
) -> Result<EvalReport> {
    let h = &checkpoint.header;
    if h.n_users != split.train.n_users || h.n_items != split.train.n_items {
        return Err(Error::validation(format!(
            "checkpoint is {} users x {} items, split is {} users x {} items",
            h.n_users, h.n_items, split.train.n_users, split.train.n_items
        )));
    }
    let opts = ForwardOptions::inference(h.mode, h.layers, h.tau, h.hidden);
    let state = forward(&checkpoint.embeddings, prepared, &opts)?;
    let (m, n, _) = evaluate_pooled(state.pooled.view(), split, phase, k, false)?;
    Ok(EvalReport {
        dataset: String::new(),
        mode: h.mode.to_string(),
        seed: split.seed,
        phase,
        k,
        recall: m.recall,
        ndcg: m.ndcg,
        precision: m.precision,
        n_users_evaluated: n,
        per_user: None,
    })
}
