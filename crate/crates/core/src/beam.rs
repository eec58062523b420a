//! Constrained beam search over a trie forest, and the exhaustive ranker it
//! must agree with at saturating beam width.

use std::collections::BTreeMap;

use crate::catalog::{Catalog, Code};
use crate::error::{Error, Result};
use crate::model::{masked_log_softmax, Aggregation, Head, ScorerParams, Token};
use crate::trie::{DecodingTrie, TrieForest};

pub use crate::trie::depermute;

pub const DEFAULT_BEAM_SIZE: usize = 50;
pub const FULL_RANK_GUARD: usize = 100_000;

/// A partial decode. `prefix` is in the active trie's (possibly permuted) order.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub latent: Option<u32>,
    pub prefix: Vec<Code>,
    pub log_prob: f64,
    pub node: usize,
    acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub item: usize,
    pub item_id: String,
    pub score: f64,
}

/// Items by descending log-score, ties by item id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub entries: Vec<Ranked>,
}

impl RankedList {
    pub fn from_scores(catalog: &Catalog, scores: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut entries: Vec<Ranked> = scores
            .into_iter()
            .map(|(item, score)| Ranked {
                item,
                item_id: catalog.item_id(item).to_string(),
                score,
            })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item_id.cmp(&b.item_id)));
        RankedList { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based rank of the item, if present.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.entries.iter().position(|r| r.item == item).map(|p| p + 1)
    }

    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|r| r.item).collect()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    /// CSV rows `user_id,rank,item_id,log_score` without a header.
    pub fn csv_rows(&self, user_id: &str) -> String {
        let mut out = String::new();
        for (r, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{user_id},{},{},{}\n", r + 1, e.item_id, e.score));
        }
        out
    }
}

pub const RANKED_CSV_HEADER: &str = "user_id,rank,item_id,log_score\n";

fn leaf_of(trie: &DecodingTrie, node: usize) -> usize {
    trie.leaf_item(node).expect("completed hypothesis ends at a leaf")
}

/// One beam over latent tokens then SID steps; completed hypotheses that
/// reach the same item are aggregated by `agg`.
pub fn beam_search(
    params: &ScorerParams,
    forest: &TrieForest,
    catalog: &Catalog,
    history: &[Token],
    beam_size: usize,
    agg: Aggregation,
) -> Result<RankedList> {
    if beam_size == 0 {
        return Err(Error::arg("beam_size", "must be at least 1"));
    }
    params.check_forest(forest)?;
    if forest.items() != catalog.len() {
        return Err(Error::LengthMismatch {
            expected: catalog.len(),
            got: forest.items(),
        });
    }
    let h = params.encode_user(history)?;
    let config = params.config();
    let mut beam: Vec<Hypothesis> = if config.latent > 0 {
        let lat = params.latent_log_probs(&h);
        let mut hyps: Vec<Hypothesis> = lat
            .iter()
            .enumerate()
            .map(|(l, &lp)| Hypothesis {
                latent: Some(l as u32),
                prefix: Vec::new(),
                log_prob: lp,
                node: DecodingTrie::ROOT,
                acc: params.prefix_sum(Some(l as u32), &[]),
            })
            .collect();
        // Stable sort keeps lower latent ids first among equal scores.
        hyps.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        hyps.truncate(beam_size);
        hyps
    } else {
        vec![Hypothesis {
            latent: None,
            prefix: Vec::new(),
            log_prob: 0.0,
            node: DecodingTrie::ROOT,
            acc: params.prefix_sum(None, &[]),
        }]
    };

    let offset = config.latent_offset();
    for k in 0..config.m {
        // (score, parent index, token, child node)
        let mut cands: Vec<(f64, usize, Code, usize)> = Vec::new();
        for (pi, hyp) in beam.iter().enumerate() {
            let trie = forest.trie(hyp.latent);
            let position = forest.permutation(hyp.latent).order()[k];
            let valid: Vec<Code> = trie.children(hyp.node).map(|(c, _)| c).collect();
            let logits = params.step_forward(&h, &hyp.acc, offset + k, Head::Position(position)).logits;
            let logp = masked_log_softmax(&logits, &valid)?;
            for ((code, child), lp) in trie.children(hyp.node).zip(logp) {
                cands.push((hyp.log_prob + lp, pi, code, child));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);
        beam = cands
            .into_iter()
            .map(|(score, pi, code, child)| {
                let parent = &beam[pi];
                let position = forest.permutation(parent.latent).order()[k];
                let mut acc = parent.acc.clone();
                params.push_token(&mut acc, Token { position, code });
                let mut prefix = parent.prefix.clone();
                prefix.push(code);
                Hypothesis {
                    latent: parent.latent,
                    prefix,
                    log_prob: score,
                    node: child,
                    acc,
                }
            })
            .collect();
    }

    // Contributions per item in ascending latent order, matching full_rank.
    let mut per_item: BTreeMap<usize, Vec<(Option<u32>, f64)>> = BTreeMap::new();
    for hyp in &beam {
        let item = leaf_of(forest.trie(hyp.latent), hyp.node);
        per_item.entry(item).or_default().push((hyp.latent, hyp.log_prob));
    }
    let scores = per_item.into_iter().map(|(item, mut parts)| {
        parts.sort_by_key(|p| p.0);
        let xs: Vec<f64> = parts.into_iter().map(|p| p.1).collect();
        (item, agg.combine(&xs))
    });
    Ok(RankedList::from_scores(catalog, scores))
}

/// Scores every item exhaustively.
pub fn full_rank(
    params: &ScorerParams,
    forest: &TrieForest,
    catalog: &Catalog,
    history: &[Token],
    agg: Aggregation,
) -> Result<RankedList> {
    let paths = forest.items() * params.config().latent.max(1);
    if paths > FULL_RANK_GUARD {
        return Err(Error::GuardExceeded {
            paths,
            limit: FULL_RANK_GUARD,
        });
    }
    if forest.items() != catalog.len() {
        return Err(Error::LengthMismatch {
            expected: catalog.len(),
            got: forest.items(),
        });
    }
    let scores = params.score_items(forest, history, agg)?;
    Ok(RankedList::from_scores(catalog, scores.into_iter().enumerate()))
}
