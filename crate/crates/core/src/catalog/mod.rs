//! Item universe: feature ingestion, residual k-means tokenization into
//! semantic IDs, collision resolution and catalog persistence.

pub mod io;
pub mod kmeans;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_features, load_interactions, InteractionDataset, UserSequence};

/// A single token inside one SID position's vocabulary.
pub type Code = u32;

/// Residual sets below this variance get an all-zero codebook.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub item_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub Vec<Code>);

impl SemanticId {
    pub fn new(codes: Vec<Code>) -> Self {
        SemanticId(codes)
    }

    pub fn codes(&self) -> &[Code] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length of the longest common prefix with `other`.
    pub fn common_prefix(&self, other: &SemanticId) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .take_while(|(a, b)| a == b)
            .count()
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<Code>> for SemanticId {
    fn from(v: Vec<Code>) -> Self {
        SemanticId(v)
    }
}

/// Per-level centroid arrays.
///
/// Residual codebooks quantize the full vector level by level. When `blocks`
/// is set, level `j` instead quantizes the feature slice `blocks[j]`
/// independently (one modality per SID position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub levels: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<(usize, usize)>>,
}

impl Codebooks {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn vocab(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    /// Feature dimension the codebooks expect.
    pub fn input_dim(&self) -> usize {
        match &self.blocks {
            Some(blocks) => blocks.iter().map(|(s, l)| s + l).max().unwrap_or(0),
            None => self
                .levels
                .first()
                .and_then(|l| l.first())
                .map_or(0, Vec::len),
        }
    }

    fn check_dim(&self, item: &str, vector: &[f64]) -> Result<()> {
        let want = self.input_dim();
        let ok = match &self.blocks {
            Some(_) => vector.len() >= want,
            None => vector.len() == want,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what: format!("features of item {item}"),
                expected: want,
                got: vector.len(),
            })
        }
    }

    /// Quantizes one vector. Returns the codes and, per level, the vector
    /// that level's centroids were compared against.
    pub fn encode(&self, vector: &[f64]) -> (SemanticId, Vec<Vec<f64>>) {
        let mut codes = Vec::with_capacity(self.depth());
        let mut inputs = Vec::with_capacity(self.depth());
        match &self.blocks {
            Some(blocks) => {
                for (level, &(start, len)) in self.levels.iter().zip(blocks) {
                    let slice = vector[start..start + len].to_vec();
                    codes.push(kmeans::nearest(level, &slice).0 as Code);
                    inputs.push(slice);
                }
            }
            None => {
                let mut residual = vector.to_vec();
                for level in &self.levels {
                    let (code, _) = kmeans::nearest(level, &residual);
                    inputs.push(residual.clone());
                    for (r, c) in residual.iter_mut().zip(&level[code]) {
                        *r -= c;
                    }
                    codes.push(code as Code);
                }
            }
        }
        (SemanticId(codes), inputs)
    }

    /// Reconstruction residual left after all levels (residual codebooks).
    pub fn final_residual(&self, vector: &[f64]) -> Vec<f64> {
        let mut residual = vector.to_vec();
        for level in &self.levels {
            let (code, _) = kmeans::nearest(level, &residual);
            for (r, c) in residual.iter_mut().zip(&level[code]) {
                *r -= c;
            }
        }
        residual
    }
}

fn validate_features(features: &[ItemFeatures]) -> Result<usize> {
    let first = features
        .first()
        .ok_or_else(|| Error::arg("features", "no items"))?;
    let dim = first.vector.len();
    if dim == 0 {
        return Err(Error::arg("features", "feature dimension must be at least 1"));
    }
    let mut seen = HashSet::with_capacity(features.len());
    for f in features {
        if f.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                what: format!("features of item {}", f.item_id),
                expected: dim,
                got: f.vector.len(),
            });
        }
        if f.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(f.item_id.clone()));
        }
        if !seen.insert(f.item_id.as_str()) {
            return Err(Error::arg("features", format!("duplicate item_id {}", f.item_id)));
        }
    }
    Ok(dim)
}

fn fit_level(points: &[Vec<f64>], vocab: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if kmeans::total_variance(points) < DEGENERATE_VARIANCE {
        return vec![vec![0.0; points[0].len()]; vocab];
    }
    kmeans::fit(points, vocab, max_iters, rng).centroids
}

/// Residual k-means: level 1 clusters the raw vectors, level `j` clusters the
/// residuals left by levels `1..j`.
pub fn rq_kmeans_fit(
    features: &[ItemFeatures],
    m: usize,
    vocab: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Codebooks> {
    validate_features(features)?;
    if m == 0 {
        return Err(Error::arg("m", "SID length must be at least 1"));
    }
    if features.len() < vocab || vocab == 0 {
        return Err(Error::InsufficientItems {
            items: features.len(),
            vocab,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residuals: Vec<Vec<f64>> = features.iter().map(|f| f.vector.clone()).collect();
    let mut levels = Vec::with_capacity(m);
    for _ in 0..m {
        let centroids = fit_level(&residuals, vocab, max_iters, &mut rng);
        for r in residuals.iter_mut() {
            let (code, _) = kmeans::nearest(&centroids, r);
            for (v, c) in r.iter_mut().zip(&centroids[code]) {
                *v -= c;
            }
        }
        levels.push(centroids);
    }
    Ok(Codebooks {
        levels,
        blocks: None,
    })
}

/// Independent k-means per feature block; block `j` becomes SID position `j`.
pub fn block_kmeans_fit(
    features: &[ItemFeatures],
    blocks: &[(usize, usize)],
    vocab: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Codebooks> {
    let dim = validate_features(features)?;
    if blocks.is_empty() {
        return Err(Error::arg("blocks", "at least one block is required"));
    }
    if let Some(&(s, l)) = blocks.iter().find(|(s, l)| *l == 0 || s + l > dim) {
        return Err(Error::arg("blocks", format!("block ({s}, {l}) outside feature dimension {dim}")));
    }
    if features.len() < vocab || vocab == 0 {
        return Err(Error::InsufficientItems {
            items: features.len(),
            vocab,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = blocks
        .iter()
        .map(|&(start, len)| {
            let slices: Vec<Vec<f64>> = features
                .iter()
                .map(|f| f.vector[start..start + len].to_vec())
                .collect();
            fit_level(&slices, vocab, max_iters, &mut rng)
        })
        .collect();
    Ok(Codebooks {
        levels,
        blocks: Some(blocks.to_vec()),
    })
}

/// Nearest-centroid codes per level, in feature order.
pub fn assign_sids(
    features: &[ItemFeatures],
    codebooks: &Codebooks,
) -> Result<IndexMap<String, SemanticId>> {
    let mut out = IndexMap::with_capacity(features.len());
    for f in features {
        codebooks.check_dim(&f.item_id, &f.vector)?;
        if f.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(f.item_id.clone()));
        }
        out.insert(f.item_id.clone(), codebooks.encode(&f.vector).0);
    }
    Ok(out)
}

/// Makes the SID map injective by moving every duplicate after the first onto
/// its next-nearest last-level centroid whose SID is still free.
pub fn resolve_collisions(
    features: &[ItemFeatures],
    codebooks: &Codebooks,
    sids: &IndexMap<String, SemanticId>,
) -> Result<IndexMap<String, SemanticId>> {
    let by_id: HashMap<&str, &ItemFeatures> =
        features.iter().map(|f| (f.item_id.as_str(), f)).collect();
    let mut taken: HashSet<SemanticId> = HashSet::with_capacity(sids.len());
    let mut displaced = Vec::new();
    for (id, sid) in sids {
        if !taken.insert(sid.clone()) {
            displaced.push(id.clone());
        }
    }
    let mut out = sids.clone();
    let last_level = match codebooks.levels.last() {
        Some(level) => level,
        None => return Ok(out),
    };
    for id in displaced {
        let f = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownItem(id.clone()))?;
        codebooks.check_dim(&f.item_id, &f.vector)?;
        let (_, inputs) = codebooks.encode(&f.vector);
        let last_input = inputs.last().expect("codebooks have at least one level");
        let mut candidate = out[&id].clone();
        let slot = candidate.len() - 1;
        let mut placed = false;
        for code in kmeans::ranked_centroids(last_level, last_input) {
            candidate.0[slot] = code as Code;
            if !taken.contains(&candidate) {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::VocabularyExhausted(id));
        }
        taken.insert(candidate.clone());
        out.insert(id, candidate);
    }
    Ok(out)
}

/// Tokenized item universe. Item order is the feature order and defines the
/// item indices used throughout the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub m: usize,
    #[serde(rename = "M")]
    pub vocab: usize,
    pub codebooks: Codebooks,
    pub sids: IndexMap<String, SemanticId>,
}

impl Catalog {
    /// Builds a catalog after checking shapes, code ranges and uniqueness.
    pub fn new(
        m: usize,
        vocab: usize,
        codebooks: Codebooks,
        sids: IndexMap<String, SemanticId>,
    ) -> Result<Self> {
        if codebooks.depth() != m || codebooks.levels.iter().any(|l| l.len() != vocab) {
            return Err(Error::arg(
                "codebooks",
                format!("expected {m} levels of {vocab} centroids"),
            ));
        }
        let catalog = Catalog {
            m,
            vocab,
            codebooks,
            sids,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Builds a catalog from explicit SIDs with no codebooks attached.
    pub fn from_sids(
        m: usize,
        vocab: usize,
        sids: impl IntoIterator<Item = (String, SemanticId)>,
    ) -> Result<Self> {
        let codebooks = Codebooks {
            levels: vec![vec![Vec::new(); vocab]; m],
            blocks: None,
        };
        Catalog::new(m, vocab, codebooks, sids.into_iter().collect())
    }

    /// Fit residual codebooks, assign and de-duplicate SIDs.
    pub fn tokenize(
        features: &[ItemFeatures],
        m: usize,
        vocab: usize,
        max_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        let codebooks = rq_kmeans_fit(features, m, vocab, max_iters, seed)?;
        Self::from_codebooks(features, codebooks)
    }

    pub fn from_codebooks(features: &[ItemFeatures], codebooks: Codebooks) -> Result<Self> {
        let sids = assign_sids(features, &codebooks)?;
        let sids = resolve_collisions(features, &codebooks, &sids)?;
        Catalog::new(codebooks.depth(), codebooks.vocab(), codebooks, sids)
    }

    fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&SemanticId, &str> = HashMap::with_capacity(self.sids.len());
        for (id, sid) in &self.sids {
            if sid.len() != self.m {
                return Err(Error::InvalidSid {
                    item: id.clone(),
                    reason: format!("length {} != {}", sid.len(), self.m),
                });
            }
            if let Some(c) = sid.0.iter().find(|&&c| c as usize >= self.vocab) {
                return Err(Error::InvalidSid {
                    item: id.clone(),
                    reason: format!("code {c} outside vocabulary of size {}", self.vocab),
                });
            }
            if let Some(prev) = owner.insert(sid, id) {
                return Err(Error::DuplicateSid {
                    sid: sid.0.clone(),
                    first: prev.to_string(),
                    second: id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Replaces the SIDs of the listed items; the result must stay injective.
    pub fn override_sids(&self, overrides: &IndexMap<String, SemanticId>) -> Result<Catalog> {
        let mut sids = self.sids.clone();
        for (id, sid) in overrides {
            match sids.get_mut(id) {
                Some(slot) => *slot = sid.clone(),
                None => return Err(Error::UnknownItem(id.clone())),
            }
        }
        let out = Catalog {
            sids,
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }

    /// Overrides that make every listed item a sibling of the first one:
    /// items off the anchor's `(m−1)`-prefix take its lowest free last codes.
    pub fn sibling_overrides(&self, group: &[String]) -> Result<IndexMap<String, SemanticId>> {
        let Some(anchor) = group.first() else {
            return Ok(IndexMap::new());
        };
        let prefix = self.sid_of(anchor)?.codes()[..self.m - 1].to_vec();
        let mut movers = Vec::new();
        for id in &group[1..] {
            if self.sid_of(id)?.codes()[..self.m - 1] != prefix[..] {
                movers.push(id.clone());
            }
        }
        let taken: std::collections::HashSet<Code> = self
            .sids
            .iter()
            .filter(|(id, s)| s.codes()[..self.m - 1] == prefix[..] && !movers.contains(id))
            .map(|(_, s)| s.codes()[self.m - 1])
            .collect();
        let mut free = (0..self.vocab as Code).filter(|c| !taken.contains(c));
        let mut out = IndexMap::new();
        for id in movers {
            let code = free
                .next()
                .ok_or_else(|| Error::VocabularyExhausted(format!("no free sibling slot for {id}")))?;
            let mut codes = prefix.clone();
            codes.push(code);
            out.insert(id, SemanticId(codes));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.sids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sids.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.sids.get_index_of(item_id)
    }

    pub fn item_id(&self, index: usize) -> &str {
        self.sids.get_index(index).expect("item index in range").0
    }

    pub fn sid(&self, index: usize) -> &SemanticId {
        &self.sids[index]
    }

    pub fn sid_of(&self, item_id: &str) -> Result<&SemanticId> {
        self.sids
            .get(item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.sids.keys().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Catalog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Catalog = serde_json::from_str(&text)?;
        Catalog::new(raw.m, raw.vocab, raw.codebooks, raw.sids)
    }
}

/// Sum of squared final residuals over all items.
pub fn quantization_error(features: &[ItemFeatures], codebooks: &Codebooks) -> f64 {
    features
        .iter()
        .map(|f| {
            codebooks
                .final_residual(&f.vector)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        })
        .sum()
}
