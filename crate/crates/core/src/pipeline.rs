//! End-to-end steps shared by the command line and the test suites.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::{block_kmeans_fit, Catalog, ItemFeatures};
use crate::error::{Error, Result};
use crate::eval::Split;
use crate::model::{history_tokens, train, ScorerConfig, ScorerParams, Token, TrainConfig, TrainExample, TrainOutcome};
use crate::synth::{Placement, World};
use crate::trie::{Permutation, TrieForest};

/// Tokenizes features (block-wise when `blocks` is given) and applies placement directives.
pub fn tokenize(
    features: &[ItemFeatures],
    placement: &Placement,
    m: usize,
    vocab: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Catalog> {
    let mut catalog = match &placement.blocks {
        Some(blocks) => {
            if blocks.len() != m {
                return Err(Error::Config {
                    key: "m".into(),
                    reason: format!("{} modality blocks but m = {m}", blocks.len()),
                });
            }
            let books = block_kmeans_fit(features, blocks, vocab, max_iters, seed)?;
            Catalog::from_codebooks(features, books)?
        }
        None => Catalog::tokenize(features, m, vocab, max_iters, seed)?,
    };
    if !placement.sid_overrides.is_empty() {
        catalog = catalog.override_sids(&placement.sid_overrides)?;
    }
    for group in &placement.sibling_groups {
        let ov = catalog.sibling_overrides(group)?;
        catalog = catalog.override_sids(&ov)?;
    }
    Ok(catalog)
}

pub fn tokenize_world(world: &World, m: usize, vocab: usize, max_iters: usize, seed: u64) -> Result<Catalog> {
    let placement = Placement {
        sid_overrides: world.spec.sid_overrides.clone(),
        sibling_groups: world.spec.sibling_groups.clone(),
        blocks: world.spec.modality.as_ref().map(|m| m.blocks()),
    };
    tokenize(&world.features, &placement, m, vocab, max_iters, seed)
}

/// One shared trie, or one trie per SID permutation when `bind` is set
/// (which requires `latent = m!`).
pub fn build_forest(catalog: &Catalog, latent: usize, bind: bool) -> Result<TrieForest> {
    if !bind {
        return TrieForest::from_catalog(catalog);
    }
    let perms = Permutation::all(catalog.m);
    if perms.len() != latent {
        return Err(Error::Config {
            key: "latent".into(),
            reason: format!("permutation binding needs latent = {} (m!), got {latent}", perms.len()),
        });
    }
    TrieForest::build(catalog, perms)
}

/// Next-item examples from every training prefix, and one validation example per user.
pub fn training_examples(catalog: &Catalog, split: &Split) -> (Vec<TrainExample>, Vec<TrainExample>) {
    let mut train_set = Vec::new();
    let mut valid_set = Vec::with_capacity(split.len());
    for u in &split.users {
        for t in 1..u.train.len() {
            train_set.push(TrainExample {
                history: history_tokens(catalog, &u.train[..t]),
                target: u.train[t],
                latent: None,
            });
        }
        valid_set.push(TrainExample {
            history: history_tokens(catalog, &u.train),
            target: u.valid,
            latent: None,
        });
    }
    (train_set, valid_set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub scorer: ScorerConfig,
    pub bind: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub params: ScorerParams,
    pub forest: TrieForest,
    pub outcome: TrainOutcome,
}

pub fn fit_model(catalog: &Catalog, split: &Split, spec: &ModelSpec) -> Result<Fitted> {
    let forest = build_forest(catalog, spec.scorer.latent, spec.bind)?;
    let (train_set, valid_set) = training_examples(catalog, split);
    let init = ScorerParams::init(spec.scorer.clone())?;
    let outcome = train(init, &forest, &train_set, &valid_set, &spec.train)?;
    Ok(Fitted {
        params: outcome.params.clone(),
        forest,
        outcome,
    })
}

/// Test-time histories of up to `n` users drawn without replacement, in split order.
pub fn sample_users(split: &Split, n: usize, seed: u64) -> Vec<usize> {
    if n >= split.len() {
        return (0..split.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, split.len(), n).into_vec();
    idx.sort_unstable();
    idx
}

pub fn user_histories(catalog: &Catalog, split: &Split, users: &[usize]) -> Vec<Vec<Token>> {
    users
        .iter()
        .map(|&u| history_tokens(catalog, &split.users[u].test_history()))
        .collect()
}
