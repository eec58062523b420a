//! Statistical studies over item-by-user probability matrices.

pub mod reversal;
pub mod report;
pub mod stats;
pub mod studies;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Aggregation, ScorerParams, Token};
use crate::trie::TrieForest;

pub use reversal::{
    cantelli_bound, correlated_gaussian_rows, rank_reversal_rate, rank_reversal_rate_brute, reversal_bound_audit,
    ReversalRate,
};
pub use report::{Group, StudyReport};
pub use stats::{kendall_tau_b, pearson};
pub use studies::{
    correlation_study, effective_distance, effective_distance_study, generated_latent_usage, kendall_structure_study, latent_usage_distribution,
    latte_effective_correlation, posterior_latent_usage, sample_pairs_by_distance, transitivity_audit, PairSample, Stratum,
};

/// Whether similarities use raw probabilities or their logarithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbSource {
    #[default]
    Prob,
    LogProb,
}

impl std::str::FromStr for ProbSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(ProbSource::Prob),
            "logprob" => Ok(ProbSource::LogProb),
            other => Err(Error::Config {
                key: "prob_source".into(),
                reason: format!("expected prob or logprob, got {other}"),
            }),
        }
    }
}

/// `P(item | user)`: one row per item, one column per sampled user.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: Vec<Vec<f64>>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl ProbMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let users = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || users == 0 {
            return Err(Error::arg("rows", "empty probability matrix"));
        }
        for r in &rows {
            if r.len() != users {
                return Err(Error::LengthMismatch {
                    expected: users,
                    got: r.len(),
                });
            }
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::arg("rows", "entries must lie in [0, 1]"));
            }
        }
        let means = rows.iter().map(|r| stats::mean(r)).collect();
        let variances = rows.iter().map(|r| stats::variance(r)).collect();
        Ok(ProbMatrix {
            rows,
            means,
            variances,
        })
    }

    /// Exhaustive item probabilities for each history.
    pub fn from_model(
        params: &ScorerParams,
        forest: &TrieForest,
        histories: &[Vec<Token>],
        agg: Aggregation,
    ) -> Result<Self> {
        let cols: Vec<Vec<f64>> = histories
            .par_iter()
            .map(|h| params.score_items(forest, h, agg).map(|s| s.into_iter().map(f64::exp).collect()))
            .collect::<Result<_>>()?;
        let n_items = forest.items();
        let rows = (0..n_items).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        Self::from_rows(rows)
    }

    pub fn n_items(&self) -> usize {
        self.rows.len()
    }

    pub fn n_users(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.rows[item]
    }

    pub fn mean(&self, item: usize) -> f64 {
        self.means[item]
    }

    pub fn variance(&self, item: usize) -> f64 {
        self.variances[item]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n_users()).map(|u| self.rows.iter().map(|r| r[u]).sum()).collect()
    }

    fn source_row(&self, item: usize, source: ProbSource) -> Vec<f64> {
        match source {
            ProbSource::Prob => self.rows[item].clone(),
            ProbSource::LogProb => self.rows[item].iter().map(|p| p.ln()).collect(),
        }
    }

    /// Pearson similarity of two item rows; `None` for constant rows.
    pub fn similarity(&self, i: usize, j: usize, source: ProbSource) -> Option<f64> {
        pearson(&self.source_row(i, source), &self.source_row(j, source)).ok()
    }
}

/// All pairwise row similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<Option<f64>>,
}

impl SimilarityMatrix {
    pub fn from_probs(probs: &ProbMatrix, source: ProbSource) -> Self {
        let n = probs.n_items();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| probs.source_row(i, source)).collect();
        let values = (0..n * n)
            .into_par_iter()
            .map(|k| pearson(&rows[k / n], &rows[k % n]).ok())
            .collect();
        SimilarityMatrix { n, values }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        SimilarityMatrix {
            n,
            values: (0..n * n).map(|k| f(k / n, k % n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.n + j]
    }
}
