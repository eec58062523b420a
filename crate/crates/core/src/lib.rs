//! Semantic-ID generative recommendation with latent decoding tokens.

pub mod analysis;
pub mod beam;
pub mod catalog;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod trie;

pub use catalog::{Catalog, Code, SemanticId};
pub use error::{Error, Result};
pub use model::{Aggregation, ScorerConfig, ScorerParams};
pub use trie::{DecodingTrie, Permutation, TrieForest};
