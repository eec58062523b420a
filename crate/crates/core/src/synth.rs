//! Synthetic interaction worlds with known preference structure.

use std::path::Path;

use indexmap::IndexMap;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::io::{write_features, write_interactions};
use crate::catalog::{InteractionDataset, ItemFeatures, SemanticId, UserSequence};
use crate::error::{Error, Result};

pub const DEFAULT_USER_NOISE: f64 = 0.5;

/// Per-modality feature blocks. Item `i` has attribute `attributes[i][j]` in
/// modality `j`; its block-`j` features are that attribute's centroid plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub attributes: Vec<Vec<usize>>,
    pub block_dim: usize,
    pub weights: Vec<f64>,
}

impl ModalitySpec {
    pub fn modalities(&self) -> usize {
        self.weights.len()
    }

    /// `(start, len)` feature slices, one per modality.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        (0..self.modalities()).map(|j| (j * self.block_dim, self.block_dim)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_groups: usize,
    /// Preference logits, groups × items.
    pub affinity: Vec<Vec<f64>>,
    pub group_probs: Vec<f64>,
    /// Allocate users to groups in exact proportion instead of i.i.d. draws.
    pub balanced_groups: bool,
    /// Inclusive sequence length range.
    pub seq_len: (usize, usize),
    pub feature_noise: f64,
    pub user_noise: f64,
    pub sid_overrides: IndexMap<String, SemanticId>,
    /// Items to place as trie siblings of the group's first item after tokenization.
    pub sibling_groups: Vec<Vec<String>>,
    pub modality: Option<ModalitySpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user_group: IndexMap<String, usize>,
    /// Per-user preference distribution over items, users in order.
    pub preferences: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Item rows of the preference matrix (`rows[i][u]`).
    pub fn item_rows(&self) -> Vec<Vec<f64>> {
        let n_items = self.preferences.first().map_or(0, Vec::len);
        (0..n_items).map(|i| self.preferences.iter().map(|p| p[i]).collect()).collect()
    }
}

/// Tokenizer directives carried alongside a world's files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Placement {
    pub sid_overrides: IndexMap<String, SemanticId>,
    pub sibling_groups: Vec<Vec<String>>,
    /// Per-modality feature slices for block quantization.
    pub blocks: Option<Vec<(usize, usize)>>,
}

impl Placement {
    pub fn load(path: &Path) -> Result<Placement> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub features: Vec<ItemFeatures>,
    pub interactions: InteractionDataset,
    pub truth: GroundTruth,
    pub spec: WorldSpec,
}

impl World {
    /// Writes `features.jsonl`, `interactions.jsonl` and `ground_truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_features(&dir.join("features.jsonl"), &self.features)?;
        write_interactions(&dir.join("interactions.jsonl"), &self.interactions)?;
        let gt = dir.join("ground_truth.json");
        std::fs::write(&gt, serde_json::to_string(&self.truth)?).map_err(|e| Error::io(&gt, e))?;
        let placement = Placement {
            sid_overrides: self.spec.sid_overrides.clone(),
            sibling_groups: self.spec.sibling_groups.clone(),
            blocks: self.spec.modality.as_ref().map(ModalitySpec::blocks),
        };
        let pl = dir.join("placement.json");
        std::fs::write(&pl, serde_json::to_string(&placement)?).map_err(|e| Error::io(&pl, e))?;
        Ok(())
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.features.iter().position(|f| f.item_id == item_id)
    }
}

pub fn item_id(i: usize) -> String {
    format!("item{i:04}")
}

pub fn user_id(u: usize) -> String {
    format!("user{u:05}")
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn validate(spec: &WorldSpec) -> Result<()> {
    let bad = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
    if spec.n_groups == 0 || spec.n_items < spec.n_groups {
        return bad("n_items", format!("{} items cannot cover {} groups", spec.n_items, spec.n_groups));
    }
    if spec.n_users == 0 {
        return bad("n_users", "need at least one user".into());
    }
    if spec.affinity.len() != spec.n_groups || spec.affinity.iter().any(|r| r.len() != spec.n_items) {
        return bad("affinity", "must be n_groups × n_items".into());
    }
    if spec.affinity.iter().flatten().any(|a| !a.is_finite()) {
        return bad("affinity", "non-finite entry".into());
    }
    let total: f64 = spec.group_probs.iter().sum();
    if spec.group_probs.len() != spec.n_groups || spec.group_probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return bad("group_probs", "must be a distribution over groups".into());
    }
    if spec.seq_len.0 < 3 || spec.seq_len.1 < spec.seq_len.0 {
        return bad("seq_len", "lengths must be at least 3".into());
    }
    if let Some(m) = &spec.modality {
        if m.attributes.len() != spec.n_items || m.attributes.iter().any(|a| a.len() != m.modalities()) {
            return bad("modality", "attributes must be n_items × modalities".into());
        }
    }
    Ok(())
}

fn item_features(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<ItemFeatures> {
    match &spec.modality {
        None => (0..spec.n_items)
            .map(|i| ItemFeatures {
                item_id: item_id(i),
                vector: spec
                    .affinity
                    .iter()
                    .map(|row| row[i] + spec.feature_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            })
            .collect(),
        Some(m) => {
            let n_attr = m.attributes.iter().flatten().copied().max().unwrap_or(0) + 1;
            let centroids: Vec<Vec<Vec<f64>>> = (0..m.modalities())
                .map(|_| {
                    (0..n_attr)
                        .map(|_| (0..m.block_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                        .collect()
                })
                .collect();
            (0..spec.n_items)
                .map(|i| ItemFeatures {
                    item_id: item_id(i),
                    vector: (0..m.modalities())
                        .flat_map(|j| centroids[j][m.attributes[i][j]].clone())
                        .map(|c| c + spec.feature_noise * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                })
                .collect()
        }
    }
}

/// Features, i.i.d. preference-sampled sequences and the ground truth behind them.
pub fn generate_world(spec: WorldSpec) -> Result<World> {
    validate(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let features = item_features(&spec, &mut rng);
    let groups = WeightedIndex::new(&spec.group_probs).map_err(|e| Error::arg("group_probs", e.to_string()))?;
    let mut user_group = IndexMap::new();
    let mut preferences = Vec::with_capacity(spec.n_users);
    let mut sequences = Vec::with_capacity(spec.n_users);
    let balanced = spec.balanced_groups.then(|| {
        let mut slots = Vec::with_capacity(spec.n_users);
        let mut cum = 0.0;
        for (g, p) in spec.group_probs.iter().enumerate() {
            cum += p;
            let upto = if g + 1 == spec.n_groups { spec.n_users } else { (cum * spec.n_users as f64).round() as usize };
            slots.resize(upto.max(slots.len()), g);
        }
        slots.shuffle(&mut rng);
        slots
    });
    for u in 0..spec.n_users {
        let g = match &balanced {
            Some(slots) => slots[u],
            None => groups.sample(&mut rng),
        };
        let logits: Vec<f64> = spec.affinity[g]
            .iter()
            .map(|a| a + spec.user_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pref = softmax(&logits);
        let draw = WeightedIndex::new(&pref).map_err(|e| Error::arg("affinity", e.to_string()))?;
        let len = rng.gen_range(spec.seq_len.0..=spec.seq_len.1);
        let items = (0..len).map(|_| item_id(draw.sample(&mut rng))).collect();
        user_group.insert(user_id(u), g);
        preferences.push(pref);
        sequences.push(UserSequence { user_id: user_id(u), items });
    }
    Ok(World {
        features,
        interactions: InteractionDataset { sequences },
        truth: GroundTruth {
            user_group,
            preferences,
        },
        spec,
    })
}

/// Groups with a block of favoured items each and random background logits.
fn clustered_affinity(rng: &mut ChaCha8Rng, n_groups: usize, n_items: usize, strength: f64) -> Vec<Vec<f64>> {
    let mut owner: Vec<usize> = (0..n_items).map(|i| i % n_groups).collect();
    owner.shuffle(rng);
    (0..n_groups)
        .map(|g| {
            (0..n_items)
                .map(|i| {
                    let base = 0.5 * rng.sample::<f64, _>(StandardNormal);
                    if owner[i] == g {
                        base + strength
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect()
}

/// The default benchmark world: 2000 users, 256 items, 8 preference groups.
pub fn benchmark_spec(seed: u64) -> WorldSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe9c);
    let (n_groups, n_items) = (8, 256);
    WorldSpec {
        n_users: 2000,
        n_items,
        n_groups,
        affinity: clustered_affinity(&mut rng, n_groups, n_items, 2.5),
        group_probs: vec![1.0 / n_groups as f64; n_groups],
        balanced_groups: false,
        seq_len: (5, 12),
        feature_noise: 0.3,
        user_noise: DEFAULT_USER_NOISE,
        sid_overrides: IndexMap::new(),
        sibling_groups: Vec::new(),
        modality: None,
        seed,
    }
}

/// Indices of the adversarial items planted by the special worlds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub items: Vec<usize>,
}

/// Two equal groups share every preference except the order of items A and
/// B, which are forced to be trie siblings. Returns the world and `[A, B]`.
pub fn make_reversal_pair_world(seed: u64) -> Result<(World, Planted)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e5e);
    let (n_groups, n_items) = (2, 64);
    let shared: Vec<f64> = (0..n_items).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let (a, b) = (0usize, 1usize);
    // A gap many noise deviations wide keeps every user's order fixed by group.
    let (hi, lo) = (1.5, -4.5);
    let mut affinity = vec![shared.clone(), shared];
    affinity[0][a] = hi;
    affinity[0][b] = lo;
    affinity[1][a] = lo;
    affinity[1][b] = hi;
    let spec = WorldSpec {
        n_users: 1000,
        n_items,
        n_groups,
        affinity,
        group_probs: vec![0.5, 0.5],
        balanced_groups: true,
        seq_len: (5, 10),
        feature_noise: 0.3,
        user_noise: DEFAULT_USER_NOISE,
        sid_overrides: IndexMap::new(),
        sibling_groups: vec![vec![item_id(a), item_id(b)]],
        modality: None,
        seed,
    };
    Ok((generate_world(spec)?, Planted { items: vec![a, b] }))
}

/// Groups G_A (0.2), G_B (0.2) and a background group (0.6): G_A favours
/// i1 and i2, G_B favours i2 and i3. The three items share one trie subtree.
/// Returns the world and `[i1, i2, i3]`.
pub fn make_intransitive_world(seed: u64) -> Result<(World, Planted)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7);
    let (n_groups, n_items) = (3, 64);
    let base: Vec<f64> = (0..n_items).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let (i1, i2, i3) = (0usize, 1usize, 2usize);
    let (hi, lo) = (3.0, -1.0);
    let mut affinity = vec![base.clone(), base.clone(), base];
    for (g, liked) in [(0, [i1, i2]), (1, [i2, i3])] {
        for i in [i1, i2, i3] {
            affinity[g][i] = if liked.contains(&i) { hi } else { lo };
        }
    }
    for i in [i1, i2, i3] {
        affinity[2][i] = lo;
    }
    let spec = WorldSpec {
        n_users: 1000,
        n_items,
        n_groups,
        affinity,
        group_probs: vec![0.2, 0.2, 0.6],
        balanced_groups: false,
        seq_len: (5, 10),
        feature_noise: 0.3,
        // Lower noise keeps within-group spread from masking the group pattern.
        user_noise: 0.2,
        sid_overrides: IndexMap::new(),
        sibling_groups: vec![vec![item_id(i1), item_id(i2), item_id(i3)]],
        modality: None,
        seed,
    };
    Ok((generate_world(spec)?, Planted { items: vec![i1, i2, i3] }))
}

/// Items are distinct attribute tuples, one attribute per modality; group
/// preference logits are `Σ_j w_j · pref_{g,j}(attribute_j)`.
pub fn make_modality_world(seed: u64, m_modalities: usize, predictiveness: &[f64]) -> Result<World> {
    make_modality_world_sized(seed, m_modalities, predictiveness, 8, 192)
}

/// As [`make_modality_world`] with `n_attr` attribute values per modality and
/// `n_items` distinct attribute tuples.
pub fn make_modality_world_sized(
    seed: u64,
    m_modalities: usize,
    predictiveness: &[f64],
    n_attr: usize,
    n_items: usize,
) -> Result<World> {
    if predictiveness.len() != m_modalities || m_modalities == 0 {
        return Err(Error::arg("predictiveness", "need one weight per modality"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x30da);
    let n_groups = 8usize;
    let combos = n_attr.pow(m_modalities as u32);
    if combos < n_items {
        return Err(Error::arg("m_modalities", "too few attribute combinations"));
    }
    let mut all: Vec<usize> = (0..combos).collect();
    all.shuffle(&mut rng);
    let attributes: Vec<Vec<usize>> = all[..n_items]
        .iter()
        .map(|&c| (0..m_modalities).map(|j| (c / n_attr.pow(j as u32)) % n_attr).collect())
        .collect();
    let prefs: Vec<Vec<Vec<f64>>> = (0..n_groups)
        .map(|_| {
            (0..m_modalities)
                .map(|_| (0..n_attr).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        })
        .collect();
    let affinity = (0..n_groups)
        .map(|g| {
            attributes
                .iter()
                .map(|a| (0..m_modalities).map(|j| predictiveness[j] * prefs[g][j][a[j]]).sum())
                .collect()
        })
        .collect();
    let spec = WorldSpec {
        n_users: 1500,
        n_items,
        n_groups,
        affinity,
        group_probs: vec![1.0 / n_groups as f64; n_groups],
        balanced_groups: false,
        seq_len: (5, 12),
        feature_noise: 0.05,
        user_noise: DEFAULT_USER_NOISE,
        sid_overrides: IndexMap::new(),
        sibling_groups: Vec::new(),
        modality: Some(ModalitySpec {
            attributes,
            block_dim: 4,
            weights: predictiveness.to_vec(),
        }),
        seed,
    };
    generate_world(spec)
}
