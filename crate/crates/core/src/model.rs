//! Autoregressive SID scorer.
//!
//! The user encoder is a recency-weighted bag of SID-token embeddings. Each
//! decode step feeds `[h_u ; p]` through one ReLU layer, where `p` sums the
//! embeddings of every token emitted so far plus a step embedding, and reads
//! logits from the head of the vocabulary being emitted (latent tokens or one
//! SID position). Masked softmax over trie children keeps decoding on valid
//! SIDs, so item probabilities over a full trie sum to one.

use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Code};
use crate::error::{Error, Result};
use crate::trie::{DecodingTrie, TrieForest};

pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::Config {
                key: "agg".into(),
                reason: format!("expected sum or max, got {other}"),
            }),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Max => "max",
        })
    }
}

/// `ln Σ exp(x)`, summed in slice order.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Aggregation {
    pub fn combine(self, scores: &[f64]) -> f64 {
        match self {
            Aggregation::Sum => log_sum_exp(scores),
            Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub d: usize,
    pub hidden: usize,
    pub m: usize,
    #[serde(rename = "M")]
    pub vocab: usize,
    /// Latent vocabulary size; 0 is the plain SID model.
    pub latent: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl ScorerConfig {
    pub fn new(m: usize, vocab: usize, latent: usize) -> Self {
        ScorerConfig {
            d: 32,
            hidden: 64,
            m,
            vocab,
            latent,
            gamma: 0.8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.d == 0 {
            return bad("d", "must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1");
        }
        if self.m == 0 || self.vocab == 0 {
            return bad("m", "SID length and vocabulary must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        Ok(())
    }

    /// Decode steps per item: the SID positions plus the latent token if any.
    pub fn steps(&self) -> usize {
        self.m + usize::from(self.latent > 0)
    }

    pub(crate) fn latent_offset(&self) -> usize {
        usize::from(self.latent > 0)
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    emb_pos: Vec<usize>,
    emb_lat: usize,
    emb_step: usize,
    w1: usize,
    b1: usize,
    lat_w: usize,
    lat_b: usize,
    pos_w: Vec<usize>,
    pos_b: Vec<usize>,
    /// `(name, offset, len, is_bias)` in storage order.
    tensors: Vec<(String, usize, usize, bool)>,
    total: usize,
}

impl Layout {
    fn new(c: &ScorerConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, len: usize, bias: bool| {
            let at = total;
            tensors.push((name, at, len, bias));
            total += len;
            at
        };
        let emb_pos = (0..c.m)
            .map(|j| push(format!("emb_pos_{j}"), c.vocab * c.d, false))
            .collect();
        let emb_lat = push("emb_latent".into(), c.latent * c.d, false);
        let emb_step = push("emb_step".into(), (c.m + 1) * c.d, false);
        let w1 = push("w1".into(), c.hidden * 2 * c.d, false);
        let b1 = push("b1".into(), c.hidden, true);
        let lat_w = push("head_latent_w".into(), c.latent * c.hidden, false);
        let lat_b = push("head_latent_b".into(), c.latent, true);
        let mut pos_w = Vec::with_capacity(c.m);
        let mut pos_b = Vec::with_capacity(c.m);
        for j in 0..c.m {
            pos_w.push(push(format!("head_pos_{j}_w"), c.vocab * c.hidden, false));
            pos_b.push(push(format!("head_pos_{j}_b"), c.vocab, true));
        }
        Layout {
            emb_pos,
            emb_lat,
            emb_step,
            w1,
            b1,
            lat_w,
            lat_b,
            pos_w,
            pos_b,
            tensors,
            total,
        }
    }
}

/// A history or prefix token tagged with the SID position whose vocabulary
/// it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token {
    pub position: usize,
    pub code: Code,
}

/// Flattens item histories into chronological SID tokens.
pub fn history_tokens(catalog: &Catalog, items: &[usize]) -> Vec<Token> {
    items
        .iter()
        .flat_map(|&i| {
            catalog
                .sid(i)
                .codes()
                .iter()
                .enumerate()
                .map(|(position, &code)| Token { position, code })
        })
        .collect()
}

/// Which output head a step reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Latent,
    Position(usize),
}

/// Tokens already emitted: the latent token (if any) and SID tokens in decode order.
#[derive(Debug, Clone, Copy)]
pub struct Prefix<'a> {
    pub latent: Option<u32>,
    pub tokens: &'a [Token],
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub history: Vec<Token>,
    pub target: usize,
    pub latent: Option<u32>,
}

/// Softmax restricted to `valid`; other entries are exactly zero.
pub fn masked_distribution(logits: &[f64], valid: &[Code]) -> Result<Vec<f64>> {
    let logp = masked_log_softmax(logits, valid)?;
    let mut out = vec![0.0; logits.len()];
    for (&c, lp) in valid.iter().zip(logp) {
        out[c as usize] = lp.exp();
    }
    Ok(out)
}

/// Log-probabilities of the `valid` tokens, in the order given.
pub fn masked_log_softmax(logits: &[f64], valid: &[Code]) -> Result<Vec<f64>> {
    if valid.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(&c) = valid.iter().find(|&&c| c as usize >= logits.len()) {
        return Err(Error::TokenOutOfRange {
            token: c as usize,
            vocab: logits.len(),
        });
    }
    let max = valid
        .iter()
        .map(|&c| logits[c as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + valid
            .iter()
            .map(|&c| (logits[c as usize] - max).exp())
            .sum::<f64>()
            .ln();
    Ok(valid.iter().map(|&c| logits[c as usize] - lse).collect())
}

#[derive(Debug, Clone, Copy)]
enum Emit {
    Latent(u32),
    Token(Token),
}

struct PlannedStep {
    step: usize,
    head: Head,
    valid: Vec<Code>,
    target: Code,
    emit: Emit,
}

/// Forward activations of one decode step.
pub(crate) struct StepTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    config: ScorerConfig,
    layout: Layout,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    config: ScorerConfig,
    params: IndexMap<String, Vec<f64>>,
}

impl ScorerParams {
    pub fn zeros(config: ScorerConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let values = vec![0.0; layout.total];
        Ok(ScorerParams {
            config,
            layout,
            values,
        })
    }

    /// Weights and embeddings uniform in `[-0.1, 0.1]` from `config.seed`, biases zero.
    pub fn init(config: ScorerConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.config.seed);
        for (_, at, len, bias) in p.layout.tensors.clone() {
            if !bias {
                for v in &mut p.values[at..at + len] {
                    *v = rng.gen_range(-INIT_SCALE..=INIT_SCALE);
                }
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Named tensors as `(name, values)` in storage order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.layout
            .tensors
            .iter()
            .map(|(n, at, len, _)| (n.as_str(), &self.values[*at..*at + *len]))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (_, at, len, _) = self.layout.tensors.iter().find(|t| t.0 == name)?.clone();
        Some(&mut self.values[at..at + len])
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ParamsDoc {
            config: self.config.clone(),
            params: self
                .tensors()
                .map(|(n, v)| (n.to_string(), v.to_vec()))
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsDoc = serde_json::from_str(text)?;
        let mut p = Self::zeros(doc.config)?;
        for (name, at, len, _) in p.layout.tensors.clone() {
            let src = doc.params.get(&name).ok_or_else(|| Error::Config {
                key: name.clone(),
                reason: "missing parameter tensor".into(),
            })?;
            if src.len() != len {
                return Err(Error::DimensionMismatch {
                    what: name,
                    expected: len,
                    got: src.len(),
                });
            }
            p.values[at..at + len].copy_from_slice(src);
        }
        if p.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("params", "non-finite parameter"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn row(&self, at: usize, row: usize, width: usize) -> &[f64] {
        &self.values[at + row * width..at + (row + 1) * width]
    }

    fn token_embedding(&self, t: Token) -> &[f64] {
        self.row(self.layout.emb_pos[t.position], t.code as usize, self.config.d)
    }

    fn check_token(&self, t: Token) -> Result<()> {
        if t.position >= self.config.m {
            return Err(Error::TokenOutOfRange {
                token: t.position,
                vocab: self.config.m,
            });
        }
        if t.code as usize >= self.config.vocab {
            return Err(Error::TokenOutOfRange {
                token: t.code as usize,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn recency_weights(&self, len: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..len)
            .map(|t| self.config.gamma.powi((len - 1 - t) as i32))
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        w
    }

    /// Recency-weighted mean of history token embeddings.
    pub fn encode_user(&self, history: &[Token]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        for &t in history {
            self.check_token(t)?;
        }
        let w = self.recency_weights(history.len());
        let mut h = vec![0.0; self.config.d];
        for (&t, wt) in history.iter().zip(&w) {
            for (hv, e) in h.iter_mut().zip(self.token_embedding(t)) {
                *hv += wt * e;
            }
        }
        Ok(h)
    }

    fn head_rows(&self, head: Head) -> (usize, usize, usize) {
        match head {
            Head::Latent => (self.layout.lat_w, self.layout.lat_b, self.config.latent),
            Head::Position(j) => (self.layout.pos_w[j], self.layout.pos_b[j], self.config.vocab),
        }
    }

    /// Running sum of latent and emitted-token embeddings.
    pub(crate) fn prefix_sum(&self, latent: Option<u32>, tokens: &[Token]) -> Vec<f64> {
        let mut acc = vec![0.0; self.config.d];
        if let Some(l) = latent {
            for (a, e) in acc.iter_mut().zip(self.row(self.layout.emb_lat, l as usize, self.config.d)) {
                *a += e;
            }
        }
        for &t in tokens {
            self.push_token(&mut acc, t);
        }
        acc
    }

    fn emit_row(&self, emit: Emit) -> usize {
        match emit {
            Emit::Latent(l) => self.layout.emb_lat + l as usize * self.config.d,
            Emit::Token(t) => self.layout.emb_pos[t.position] + t.code as usize * self.config.d,
        }
    }

    fn push_emit(&self, acc: &mut [f64], emit: Emit) {
        let row = self.emit_row(emit);
        for (a, e) in acc.iter_mut().zip(&self.values[row..row + self.config.d]) {
            *a += e;
        }
    }

    pub(crate) fn push_token(&self, acc: &mut [f64], t: Token) {
        for (a, e) in acc.iter_mut().zip(self.token_embedding(t)) {
            *a += e;
        }
    }

    pub(crate) fn step_forward(&self, h: &[f64], acc: &[f64], step: usize, head: Head) -> StepTrace {
        let d = self.config.d;
        let step_emb = self.row(self.layout.emb_step, step, d);
        let mut input = Vec::with_capacity(2 * d);
        input.extend_from_slice(h);
        input.extend(acc.iter().zip(step_emb).map(|(a, s)| a + s));
        let width = 2 * d;
        let mut pre = self.values[self.layout.b1..self.layout.b1 + self.config.hidden].to_vec();
        for (r, z) in pre.iter_mut().enumerate() {
            let w = self.row(self.layout.w1, r, width);
            *z += w.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let (w_at, b_at, rows) = self.head_rows(head);
        let logits = (0..rows)
            .map(|c| {
                self.values[b_at + c]
                    + self
                        .row(w_at, c, self.config.hidden)
                        .iter()
                        .zip(&hidden)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        StepTrace {
            input,
            pre,
            hidden,
            logits,
        }
    }

    /// Raw logits for decode step `step` given the emitted prefix.
    pub fn step_logits(&self, h_u: &[f64], prefix: Prefix<'_>, step: usize, head: Head) -> Result<Vec<f64>> {
        if h_u.len() != self.config.d {
            return Err(Error::DimensionMismatch {
                what: "user vector".into(),
                expected: self.config.d,
                got: h_u.len(),
            });
        }
        let mismatch = |reason: &str| Err(Error::StepMismatch {
            step,
            reason: reason.into(),
        });
        let latent_model = self.config.latent > 0;
        match head {
            Head::Latent => {
                if !latent_model {
                    return Err(Error::NoLatentVocabulary);
                }
                if step != 0 || prefix.latent.is_some() || !prefix.tokens.is_empty() {
                    return mismatch("the latent token is decoded first, from an empty prefix");
                }
            }
            Head::Position(j) => {
                if j >= self.config.m {
                    return mismatch("SID position out of range");
                }
                if latent_model != prefix.latent.is_some() {
                    return mismatch("latent token must be present exactly when the model has latents");
                }
                if step != self.config.latent_offset() + prefix.tokens.len() {
                    return mismatch("step index does not equal the prefix length");
                }
                if prefix.tokens.iter().any(|t| t.position == j) {
                    return mismatch("SID position already emitted");
                }
            }
        }
        if let Some(l) = prefix.latent {
            if l as usize >= self.config.latent {
                return Err(Error::TokenOutOfRange {
                    token: l as usize,
                    vocab: self.config.latent,
                });
            }
        }
        for &t in prefix.tokens {
            self.check_token(t)?;
        }
        let acc = self.prefix_sum(prefix.latent, prefix.tokens);
        Ok(self.step_forward(h_u, &acc, step, head).logits)
    }

    /// `ln P(ℓ | u)` for every latent token.
    pub fn latent_log_probs(&self, h: &[f64]) -> Vec<f64> {
        if self.config.latent == 0 {
            return Vec::new();
        }
        let all: Vec<Code> = (0..self.config.latent as Code).collect();
        let acc = vec![0.0; self.config.d];
        let logits = self.step_forward(h, &acc, 0, Head::Latent).logits;
        masked_log_softmax(&logits, &all).expect("nonempty latent vocabulary")
    }

    /// Log-probability of decoding `item`'s path in the trie selected by `latent`,
    /// excluding the latent token itself.
    fn path_log_prob(&self, h: &[f64], forest: &TrieForest, item: usize, latent: Option<u32>, start: f64) -> Result<f64> {
        let trie = forest.trie(latent);
        let order = forest.permutation(latent).order();
        let path = trie.path(item);
        let mut acc = self.prefix_sum(latent, &[]);
        let mut node = DecodingTrie::ROOT;
        let mut lp = start;
        let offset = self.config.latent_offset();
        for (k, &code) in path.codes().iter().enumerate() {
            let valid: Vec<Code> = trie.children(node).map(|(c, _)| c).collect();
            let position = order[k];
            let logits = self.step_forward(h, &acc, offset + k, Head::Position(position)).logits;
            let logp = masked_log_softmax(&logits, &valid)?;
            let idx = valid.binary_search(&code).expect("path follows trie");
            lp += logp[idx];
            self.push_token(&mut acc, Token { position, code });
            node = trie.child(node, code).expect("path follows trie");
        }
        Ok(lp)
    }

    pub(crate) fn check_forest(&self, forest: &TrieForest) -> Result<()> {
        if forest.is_empty() || forest.items() == 0 {
            return Err(Error::EmptyTrie);
        }
        if forest.depth() != self.config.m {
            return Err(Error::LengthMismatch {
                expected: self.config.m,
                got: forest.depth(),
            });
        }
        if forest.is_bound() && forest.len() != self.config.latent {
            return Err(Error::Config {
                key: "latent".into(),
                reason: format!(
                    "bound forest has {} tries but the model has {} latent tokens",
                    forest.len(),
                    self.config.latent
                ),
            });
        }
        Ok(())
    }

    /// `ln P(item | u)`: the SID chain for the plain model; with `latent` given,
    /// the joint `ln P(ℓ|u) + ln P(path | ℓ, u)`; otherwise aggregated over all ℓ.
    pub fn item_log_prob(
        &self,
        forest: &TrieForest,
        history: &[Token],
        item: usize,
        latent: Option<u32>,
        agg: Aggregation,
    ) -> Result<f64> {
        self.check_forest(forest)?;
        if item >= forest.items() {
            return Err(Error::UnknownItem(format!("#{item}")));
        }
        let h = self.encode_user(history)?;
        if self.config.latent == 0 {
            return self.path_log_prob(&h, forest, item, None, 0.0);
        }
        let lat = self.latent_log_probs(&h);
        match latent {
            Some(l) => {
                let start = *lat.get(l as usize).ok_or(Error::TokenOutOfRange {
                    token: l as usize,
                    vocab: self.config.latent,
                })?;
                self.path_log_prob(&h, forest, item, Some(l), start)
            }
            None => {
                let per: Vec<f64> = (0..self.config.latent as u32)
                    .map(|l| self.path_log_prob(&h, forest, item, Some(l), lat[l as usize]))
                    .collect::<Result<_>>()?;
                Ok(agg.combine(&per))
            }
        }
    }

    /// Joint log-scores of every item under each latent token, by one trie
    /// traversal per latent. Row `ℓ` of the result holds `ln P(ℓ|u) + ln P(i | ℓ, u)`;
    /// the plain model yields a single row.
    pub fn joint_scores(&self, forest: &TrieForest, history: &[Token]) -> Result<Vec<Vec<f64>>> {
        self.check_forest(forest)?;
        let h = self.encode_user(history)?;
        Ok(self.joint_scores_encoded(forest, &h))
    }

    pub(crate) fn joint_scores_encoded(&self, forest: &TrieForest, h: &[f64]) -> Vec<Vec<f64>> {
        if self.config.latent == 0 {
            return vec![self.traverse(forest, h, None, 0.0)];
        }
        let lat = self.latent_log_probs(h);
        (0..self.config.latent as u32)
            .map(|l| self.traverse(forest, h, Some(l), lat[l as usize]))
            .collect()
    }

    fn traverse(&self, forest: &TrieForest, h: &[f64], latent: Option<u32>, start: f64) -> Vec<f64> {
        let trie = forest.trie(latent);
        let order = forest.permutation(latent).order();
        let offset = self.config.latent_offset();
        let mut out = vec![f64::NEG_INFINITY; trie.len()];
        let mut stack = vec![(DecodingTrie::ROOT, 0usize, self.prefix_sum(latent, &[]), start)];
        while let Some((node, k, acc, lp)) = stack.pop() {
            if let Some(item) = trie.leaf_item(node) {
                out[item] = lp;
                continue;
            }
            let valid: Vec<Code> = trie.children(node).map(|(c, _)| c).collect();
            let position = order[k];
            let logits = self.step_forward(h, &acc, offset + k, Head::Position(position)).logits;
            let logp = masked_log_softmax(&logits, &valid).expect("internal nodes have children");
            for ((code, child), l) in trie.children(node).zip(logp) {
                let mut next = acc.clone();
                self.push_token(&mut next, Token { position, code });
                stack.push((child, k + 1, next, lp + l));
            }
        }
        out
    }

    /// Aggregated log-score of every item, indexed by catalog position.
    pub fn score_items(&self, forest: &TrieForest, history: &[Token], agg: Aggregation) -> Result<Vec<f64>> {
        let rows = self.joint_scores(forest, history)?;
        Ok(aggregate_rows(&rows, agg))
    }

    /// Decode steps of `ex` in order, each with its mask and target.
    fn example_steps(&self, forest: &TrieForest, ex: &TrainExample) -> Result<Vec<PlannedStep>> {
        let mut steps = Vec::with_capacity(self.config.steps());
        let latent = if self.config.latent > 0 {
            let l = ex.latent.ok_or_else(|| Error::arg("latent", "latent model needs a sampled latent token"))?;
            if l as usize >= self.config.latent {
                return Err(Error::TokenOutOfRange {
                    token: l as usize,
                    vocab: self.config.latent,
                });
            }
            steps.push(PlannedStep {
                step: 0,
                head: Head::Latent,
                valid: (0..self.config.latent as Code).collect(),
                target: l,
                emit: Emit::Latent(l),
            });
            Some(l)
        } else {
            None
        };
        if ex.target >= forest.items() {
            return Err(Error::UnknownItem(format!("#{}", ex.target)));
        }
        let trie = forest.trie(latent);
        let order = forest.permutation(latent).order();
        let offset = self.config.latent_offset();
        let mut node = DecodingTrie::ROOT;
        for (k, &code) in trie.path(ex.target).codes().iter().enumerate() {
            let valid: Vec<Code> = trie.children(node).map(|(c, _)| c).collect();
            let position = order[k];
            steps.push(PlannedStep {
                step: offset + k,
                head: Head::Position(position),
                valid,
                target: code,
                emit: Emit::Token(Token { position, code }),
            });
            node = trie.child(node, code).expect("path follows trie");
        }
        Ok(steps)
    }

    /// Mean per-step negative log-likelihood of the batch.
    pub fn loss(&self, forest: &TrieForest, batch: &[TrainExample]) -> Result<f64> {
        self.check_forest(forest)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in batch {
            let h = self.encode_user(&ex.history)?;
            let mut acc = vec![0.0; self.config.d];
            for st in self.example_steps(forest, ex)? {
                let trace = self.step_forward(&h, &acc, st.step, st.head);
                let logp = masked_log_softmax(&trace.logits, &st.valid)?;
                total -= logp[st.valid.binary_search(&st.target).expect("target is valid")];
                count += 1;
                self.push_emit(&mut acc, st.emit);
            }
        }
        if count == 0 {
            return Err(Error::arg("batch", "empty batch"));
        }
        Ok(total / count as f64)
    }

    /// Mean per-step negative log-likelihood and its exact gradient with
    /// respect to every parameter.
    pub fn loss_and_gradients(&self, forest: &TrieForest, batch: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
        self.check_forest(forest)?;
        let plan: Vec<_> = batch
            .iter()
            .map(|ex| self.example_steps(forest, ex))
            .collect::<Result<_>>()?;
        let count: usize = plan.iter().map(Vec::len).sum();
        if count == 0 {
            return Err(Error::arg("batch", "empty batch"));
        }
        let scale = 1.0 / count as f64;
        let d = self.config.d;
        let hid = self.config.hidden;
        let mut grad = vec![0.0; self.values.len()];
        let mut total = 0.0;

        for (ex, steps) in batch.iter().zip(&plan) {
            let h = self.encode_user(&ex.history)?;
            let mut acc = vec![0.0; d];
            let mut dh = vec![0.0; d];
            // Gradient w.r.t. the step input `p` of each step, for routing
            // back to the embeddings that formed it.
            let mut dps: Vec<Vec<f64>> = Vec::with_capacity(steps.len());
            for st in steps {
                let trace = self.step_forward(&h, &acc, st.step, st.head);
                let logp = masked_log_softmax(&trace.logits, &st.valid)?;
                let t_idx = st.valid.binary_search(&st.target).expect("target is valid");
                total -= logp[t_idx];

                let (w_at, b_at, _) = self.head_rows(st.head);
                let mut dhidden = vec![0.0; hid];
                for (vi, (&c, lp)) in st.valid.iter().zip(&logp).enumerate() {
                    let g = (lp.exp() - if vi == t_idx { 1.0 } else { 0.0 }) * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let row = w_at + c as usize * hid;
                    for r in 0..hid {
                        grad[row + r] += g * trace.hidden[r];
                        dhidden[r] += g * self.values[row + r];
                    }
                    grad[b_at + c as usize] += g;
                }
                let mut dinput = vec![0.0; 2 * d];
                for r in 0..hid {
                    if trace.pre[r] <= 0.0 {
                        continue;
                    }
                    let dz = dhidden[r];
                    if dz == 0.0 {
                        continue;
                    }
                    let row = self.layout.w1 + r * 2 * d;
                    for c in 0..2 * d {
                        grad[row + c] += dz * trace.input[c];
                        dinput[c] += dz * self.values[row + c];
                    }
                    grad[self.layout.b1 + r] += dz;
                }
                for (a, b) in dh.iter_mut().zip(&dinput[..d]) {
                    *a += b;
                }
                let dp = dinput[d..].to_vec();
                let step_row = self.layout.emb_step + st.step * d;
                for (g, v) in grad[step_row..step_row + d].iter_mut().zip(&dp) {
                    *g += v;
                }
                dps.push(dp);
                self.push_emit(&mut acc, st.emit);
            }
            // A token emitted at step k feeds the input of every later step.
            let mut suffix = vec![0.0; d];
            for k in (0..steps.len()).rev() {
                let row = self.emit_row(steps[k].emit);
                for (g, v) in grad[row..row + d].iter_mut().zip(&suffix) {
                    *g += v;
                }
                for (s, v) in suffix.iter_mut().zip(&dps[k]) {
                    *s += v;
                }
            }
            let w = self.recency_weights(ex.history.len());
            for (&t, wt) in ex.history.iter().zip(&w) {
                let row = self.layout.emb_pos[t.position] + t.code as usize * d;
                for (g, v) in grad[row..row + d].iter_mut().zip(&dh) {
                    *g += wt * v;
                }
            }
        }
        Ok((total * scale, grad))
    }
}

pub(crate) fn aggregate_rows(rows: &[Vec<f64>], agg: Aggregation) -> Vec<f64> {
    if rows.len() == 1 {
        return rows[0].clone();
    }
    let n = rows[0].len();
    let mut buf = vec![0.0; rows.len()];
    (0..n)
        .map(|i| {
            for (b, r) in buf.iter_mut().zip(rows) {
                *b = r[i];
            }
            agg.combine(&buf)
        })
        .collect()
}

/// Uniform draw from `[0, latent)`.
pub fn sample_latent<R: Rng>(rng: &mut R, latent: usize) -> Result<u32> {
    if latent == 0 {
        return Err(Error::NoLatentVocabulary);
    }
    Ok(rng.gen_range(0..latent as u32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss\n");
        for e in &self.curve {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.valid_loss));
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam on next-token loss with per-epoch latent resampling and
/// early stopping on validation loss. Returns the best-validation parameters.
pub fn train(
    init: ScorerParams,
    forest: &TrieForest,
    train_set: &[TrainExample],
    valid_set: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::arg("train_set", "no training examples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config {
            key: "batch_size".into(),
            reason: "must be at least 1".into(),
        });
    }
    let latent = init.config.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut valid_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0f7_a11d);
    let valid: Vec<TrainExample> = valid_set
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            if latent > 0 {
                ex.latent = Some(sample_latent(&mut valid_rng, latent).expect("latent > 0"));
            }
            ex
        })
        .collect();

    let mut params = init;
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            for &i in chunk {
                let mut ex = train_set[i].clone();
                if latent > 0 {
                    ex.latent = Some(sample_latent(&mut rng, latent)?);
                }
                batch.push(ex);
            }
            let (loss, grad) = params.loss_and_gradients(forest, &batch)?;
            adam.step(&mut params.values, &grad, cfg.lr);
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let valid_loss = if valid.is_empty() {
            train_loss
        } else {
            params.loss(forest, &valid)?
        };
        curve.push(EpochLoss {
            epoch,
            train_loss,
            valid_loss,
        });
        if valid_loss < best.0 {
            best = (valid_loss, params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        curve,
        best_epoch: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::SemanticId;

    fn tiny_catalog() -> Catalog {
        let sids = [[0, 0], [0, 1], [1, 0], [1, 2], [2, 2], [2, 1]];
        Catalog::from_sids(
            2,
            3,
            sids.iter()
                .enumerate()
                .map(|(i, s)| (format!("i{i}"), SemanticId(s.to_vec()))),
        )
        .unwrap()
    }

    fn config(latent: usize) -> ScorerConfig {
        ScorerConfig {
            d: 4,
            hidden: 5,
            m: 2,
            vocab: 3,
            latent,
            gamma: 0.7,
            seed: 3,
        }
    }

    fn tok(position: usize, code: Code) -> Token {
        Token { position, code }
    }

    #[test]
    fn encoder_weights() {
        let p = ScorerParams::init(config(0)).unwrap();
        let single = p.encode_user(&[tok(1, 2)]).unwrap();
        assert_eq!(single, p.token_embedding(tok(1, 2)).to_vec());
        let mut flat = config(0);
        flat.gamma = 1.0;
        let q = ScorerParams::init(flat).unwrap();
        let h = q.encode_user(&[tok(0, 1), tok(1, 2)]).unwrap();
        for k in 0..4 {
            let mean = 0.5 * (q.token_embedding(tok(0, 1))[k] + q.token_embedding(tok(1, 2))[k]);
            assert!((h[k] - mean).abs() < 1e-15);
        }
        let fwd = p.encode_user(&[tok(0, 1), tok(1, 2)]).unwrap();
        let rev = p.encode_user(&[tok(1, 2), tok(0, 1)]).unwrap();
        assert_ne!(fwd, rev);
        assert!(matches!(p.encode_user(&[]), Err(Error::EmptyHistory)));
    }

    #[test]
    fn step_logits_shapes_and_checks() {
        let p = ScorerParams::init(config(2)).unwrap();
        let h = p.encode_user(&[tok(0, 1)]).unwrap();
        let empty = Prefix { latent: None, tokens: &[] };
        assert_eq!(p.step_logits(&h, empty, 0, Head::Latent).unwrap().len(), 2);
        let lat = Prefix { latent: Some(1), tokens: &[] };
        assert_eq!(p.step_logits(&h, lat, 1, Head::Position(0)).unwrap().len(), 3);
        assert!(matches!(
            p.step_logits(&h, lat, 2, Head::Position(0)),
            Err(Error::StepMismatch { .. })
        ));
        assert!(p.step_logits(&h, empty, 1, Head::Position(0)).is_err());
        let t = [tok(0, 0)];
        let a = p.step_logits(&h, Prefix { latent: Some(1), tokens: &t }, 2, Head::Position(1)).unwrap();
        let t2 = [tok(0, 2)];
        let b = p.step_logits(&h, Prefix { latent: Some(1), tokens: &t2 }, 2, Head::Position(1)).unwrap();
        assert_ne!(a, b);

        let z = ScorerParams::zeros(config(2)).unwrap();
        let hz = z.encode_user(&[tok(0, 1)]).unwrap();
        assert!(z.step_logits(&hz, empty, 0, Head::Latent).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn masked_softmax_values() {
        let u = masked_distribution(&[0.0; 4], &[0, 1, 2, 3]).unwrap();
        assert!(u.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(masked_distribution(&[3.0, -1.0, 2.0], &[1]).unwrap(), vec![0.0, 1.0, 0.0]);
        let two = masked_distribution(&[1.0, 2.0], &[0, 1]).unwrap();
        let e = std::f64::consts::E;
        assert!((two[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((two[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((two[0] - 0.2689).abs() < 1e-4);
        assert!(matches!(masked_distribution(&[1.0], &[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn normalization_and_identities() {
        let cat = tiny_catalog();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let hist = history_tokens(&cat, &[0, 3, 4]);
        for latent in [0, 2] {
            let p = ScorerParams::init(config(latent)).unwrap();
            let total: f64 = (0..cat.len())
                .map(|i| p.item_log_prob(&forest, &hist, i, None, Aggregation::Sum).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "latent {latent}: {total}");
            let fast = p.score_items(&forest, &hist, Aggregation::Sum).unwrap();
            for (i, s) in fast.iter().enumerate() {
                assert_eq!(*s, p.item_log_prob(&forest, &hist, i, None, Aggregation::Sum).unwrap());
            }
        }
        // Latent marginal identity: Σ_ℓ P(ℓ,i) from explicit latents equals sum-aggregation.
        let p = ScorerParams::init(config(2)).unwrap();
        for i in 0..cat.len() {
            let joint: f64 = (0..2)
                .map(|l| p.item_log_prob(&forest, &hist, i, Some(l), Aggregation::Sum).unwrap().exp())
                .sum();
            let agg = p.item_log_prob(&forest, &hist, i, None, Aggregation::Sum).unwrap().exp();
            assert!((joint - agg).abs() < 1e-14);
        }
    }

    #[test]
    fn shared_prefix_factors_are_identical() {
        // Items 0 and 1 share their first token; the first factor of each
        // chain is the same computation on the same inputs.
        let cat = tiny_catalog();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let p = ScorerParams::init(config(0)).unwrap();
        let h = p.encode_user(&history_tokens(&cat, &[5, 2])).unwrap();
        let empty = Prefix { latent: None, tokens: &[] };
        let first = p.step_logits(&h, empty, 0, Head::Position(0)).unwrap();
        let valid = forest.trie(None).valid_children(&[]).unwrap();
        let dist = masked_distribution(&first, &valid).unwrap();
        let l0 = p.path_log_prob(&h, &forest, 0, None, 0.0).unwrap();
        let l1 = p.path_log_prob(&h, &forest, 1, None, 0.0).unwrap();
        let second = |code: Code| {
            let t = [tok(0, 0)];
            let lg = p.step_logits(&h, Prefix { latent: None, tokens: &t }, 1, Head::Position(1)).unwrap();
            masked_distribution(&lg, &[0, 1]).unwrap()[code as usize].ln()
        };
        assert!((l0 - (dist[0].ln() + second(0))).abs() < 1e-14);
        assert!((l1 - (dist[0].ln() + second(1))).abs() < 1e-14);
    }

    #[test]
    fn singleton_catalog_has_certain_item() {
        let cat = Catalog::from_sids(2, 3, vec![("solo".to_string(), SemanticId(vec![2, 1]))]).unwrap();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let p = ScorerParams::init(config(0)).unwrap();
        let lp = p.item_log_prob(&forest, &history_tokens(&cat, &[0]), 0, None, Aggregation::Sum).unwrap();
        assert_eq!(lp, 0.0);
    }

    fn examples(cat: &Catalog, latent: bool) -> Vec<TrainExample> {
        vec![
            TrainExample { history: history_tokens(cat, &[0, 1]), target: 3, latent: latent.then_some(1) },
            TrainExample { history: history_tokens(cat, &[4]), target: 5, latent: latent.then_some(0) },
            TrainExample { history: history_tokens(cat, &[2, 3, 5]), target: 0, latent: latent.then_some(1) },
        ]
    }

    #[test]
    fn zero_params_loss_is_log_vocab() {
        let sids: Vec<_> = (0..9u32).map(|x| (format!("i{x}"), SemanticId(vec![x / 3, x % 3]))).collect();
        let cat = Catalog::from_sids(2, 3, sids).unwrap();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let p = ScorerParams::zeros(config(0)).unwrap();
        let (loss, _) = p.loss_and_gradients(&forest, &examples(&cat, false)).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn forced_paths_give_zero_loss_and_gradient() {
        let cat = Catalog::from_sids(2, 3, vec![("solo".to_string(), SemanticId(vec![1, 1]))]).unwrap();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let p = ScorerParams::init(config(0)).unwrap();
        let ex = vec![TrainExample { history: history_tokens(&cat, &[0]), target: 0, latent: None }];
        let (loss, grad) = p.loss_and_gradients(&forest, &ex).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    fn finite_difference_check(latent: usize, bound: bool) {
        let cat = tiny_catalog();
        let forest = if bound {
            TrieForest::all_permutations(&cat).unwrap()
        } else {
            TrieForest::from_catalog(&cat).unwrap()
        };
        let p = ScorerParams::init(config(latent)).unwrap();
        let batch = examples(&cat, latent > 0);
        let (loss, grad) = p.loss_and_gradients(&forest, &batch).unwrap();
        assert!((loss - p.loss(&forest, &batch).unwrap()).abs() < 1e-14);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values[i] += eps;
            let mut minus = p.clone();
            minus.values[i] -= eps;
            let num = (plus.loss(&forest, &batch).unwrap() - minus.loss(&forest, &batch).unwrap()) / (2.0 * eps);
            let denom = grad[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max((grad[i] - num).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(0, false);
        finite_difference_check(2, false);
        finite_difference_check(2, true);
    }

    #[test]
    fn latent_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!((0..100).all(|_| sample_latent(&mut rng, 1).unwrap() == 0));
        assert!(matches!(sample_latent(&mut rng, 0), Err(Error::NoLatentVocabulary)));
        let a: Vec<u32> = {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            (0..20).map(|_| sample_latent(&mut r, 8).unwrap()).collect()
        };
        let b: Vec<u32> = {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            (0..20).map(|_| sample_latent(&mut r, 8).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn latent_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[sample_latent(&mut rng, 8).unwrap() as usize] += 1;
        }
        let expect = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 7 degrees of freedom; 24.3 is the 0.999 quantile.
        assert!(chi2 < 24.3, "chi2 {chi2}");
        for c in counts {
            assert!((c as f64 / n as f64 - 0.125).abs() < 0.01);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cat = tiny_catalog();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let p = ScorerParams::init(config(2)).unwrap();
        let cfg = TrainConfig { epochs: 3, lr: 0.0, batch_size: 2, seed: 1, patience: 10 };
        let out = train(p.clone(), &forest, &examples(&cat, false), &[], &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.curve.len(), 3);
    }

    #[test]
    fn params_json_round_trip() {
        let p = ScorerParams::init(config(2)).unwrap();
        let text = p.to_json().unwrap();
        let back = ScorerParams::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let c = config(2);
        // 2·3·4 + 2·4 + 3·4 + 5·8 + 5 + 2·5 + 2 + 2·(3·5 + 3)
        assert_eq!(ScorerParams::zeros(c.clone()).unwrap().len(), 24 + 8 + 12 + 40 + 5 + 10 + 2 + 36);
        assert_eq!(ScorerParams::init(c.clone()).unwrap().len(), ScorerParams::zeros(c).unwrap().len());
    }
}
