//! Leave-one-out splitting and top-K ranking metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, full_rank, RankedList};
use crate::catalog::{Catalog, InteractionDataset};
use crate::error::{Error, Result};
use crate::model::{history_tokens, Aggregation, ScorerParams};
use crate::trie::TrieForest;

#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Items visible when predicting the test target.
    pub fn test_history(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }

    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.test_history();
        s.push(self.test);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub users: Vec<UserSplit>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Last interaction for test, second-to-last for validation, the rest for training.
pub fn leave_one_out(dataset: &InteractionDataset, catalog: &Catalog) -> Result<Split> {
    let users = dataset
        .sequences
        .iter()
        .map(|seq| {
            if seq.items.len() < 3 {
                return Err(Error::ShortSequence {
                    user: seq.user_id.clone(),
                    len: seq.items.len(),
                });
            }
            let idx: Vec<usize> = seq
                .items
                .iter()
                .map(|it| {
                    catalog.index_of(it).ok_or_else(|| Error::UnknownInteractionItem {
                        user: seq.user_id.clone(),
                        item: it.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            let n = idx.len();
            Ok(UserSplit {
                user_id: seq.user_id.clone(),
                train: idx[..n - 2].to_vec(),
                valid: idx[n - 2],
                test: idx[n - 1],
            })
        })
        .collect::<Result<_>>()?;
    Ok(Split { users })
}

pub fn recall_at_k(ranked: &RankedList, target: usize, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &RankedList, target: usize, k: usize) -> f64 {
    ndcg_for_rank(ranked.rank_of(target), k)
}

/// NDCG@K of one relevant item at 1-based `rank`.
pub fn ndcg_for_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Expected NDCG@K of a uniformly random ranking of `n` items.
pub fn random_ndcg_at_k(n: usize, k: usize) -> f64 {
    (1..=k.min(n)).map(|r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / n as f64
}

/// Produces a full or truncated ranking of the catalog for one user.
pub trait Ranker: Sync {
    fn rank(&self, user: usize, history: &[usize]) -> Result<RankedList>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub beam_size: usize,
    pub agg: Aggregation,
    /// Score every item instead of running beam search.
    pub exhaustive: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam_size: crate::beam::DEFAULT_BEAM_SIZE,
            agg: Aggregation::Sum,
            exhaustive: false,
        }
    }
}

pub struct ModelRanker<'a> {
    pub params: &'a ScorerParams,
    pub forest: &'a TrieForest,
    pub catalog: &'a Catalog,
    pub decoder: DecoderConfig,
}

impl Ranker for ModelRanker<'_> {
    fn rank(&self, _user: usize, history: &[usize]) -> Result<RankedList> {
        let tokens = history_tokens(self.catalog, history);
        if self.decoder.exhaustive {
            full_rank(self.params, self.forest, self.catalog, &tokens, self.decoder.agg)
        } else {
            beam_search(self.params, self.forest, self.catalog, &tokens, self.decoder.beam_size, self.decoder.agg)
        }
    }
}

/// Ranks by a known per-user score table, e.g. ground-truth preferences.
pub struct ScoreTableRanker<'a> {
    pub catalog: &'a Catalog,
    /// `scores[user][item]`, users in split order.
    pub scores: &'a [Vec<f64>],
}

impl Ranker for ScoreTableRanker<'_> {
    fn rank(&self, user: usize, _history: &[usize]) -> Result<RankedList> {
        let row = self.scores.get(user).ok_or_else(|| Error::arg("user", "no score row"))?;
        Ok(RankedList::from_scores(self.catalog, row.iter().copied().enumerate()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_tag: String,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n_users: usize,
}

pub const METRICS_CSV_HEADER: &str = "model_tag,seed,K,recall,ndcg,n_users\n";

impl MetricsReport {
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (k, (r, n)) in self.ks.iter().zip(self.recall.iter().zip(&self.ndcg)) {
            out.push_str(&format!("{},{},{k},{r},{n},{}\n", self.model_tag, self.seed, self.n_users));
        }
        out
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Mean Recall@K and NDCG@K over the test targets of `split`.
pub fn evaluate(ranker: &dyn Ranker, split: &Split, ks: &[usize], model_tag: &str, seed: u64) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::arg("split", "no users to evaluate"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::arg("ks", "need cutoffs of at least 1"));
    }
    let per_user: Vec<Vec<(f64, f64)>> = split
        .users
        .par_iter()
        .enumerate()
        .map(|(u, us)| {
            let ranked = ranker.rank(u, &us.test_history())?;
            Ok(ks.iter().map(|&k| (recall_at_k(&ranked, us.test, k), ndcg_at_k(&ranked, us.test, k))).collect())
        })
        .collect::<Result<_>>()?;
    let n = split.len() as f64;
    let mean = |f: &dyn Fn(&(f64, f64)) -> f64, ki: usize| per_user.iter().map(|r| f(&r[ki])).sum::<f64>() / n;
    Ok(MetricsReport {
        model_tag: model_tag.to_string(),
        seed,
        ks: ks.to_vec(),
        recall: (0..ks.len()).map(|ki| mean(&|p| p.0, ki)).collect(),
        ndcg: (0..ks.len()).map(|ki| mean(&|p| p.1, ki)).collect(),
        n_users: split.len(),
    })
}
