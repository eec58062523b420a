//! Decoding tries over semantic IDs: prefix lookup, valid-token masks, tree
//! distances and the latent-indexed forest used by permutation binding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Code, SemanticId};
use crate::error::{Error, Result};

/// Catalog size up to which [`DecodingTrie::ultrametric_audit`] checks every triple.
pub const EXHAUSTIVE_AUDIT_LIMIT: usize = 200;

/// Reordering of SID positions: `apply` yields `out[k] = sid[order[k]]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &p in &order {
            if p >= order.len() || seen[p] {
                return Err(Error::InvalidPermutation(order));
            }
            seen[p] = true;
        }
        Ok(Permutation(order))
    }

    pub fn identity(m: usize) -> Self {
        Permutation((0..m).collect())
    }

    /// All `m!` permutations in lexicographic order, identity first.
    pub fn all(m: usize) -> Vec<Permutation> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
            if prefix.len() == used.len() {
                out.push(Permutation(prefix.clone()));
                return;
            }
            for p in 0..used.len() {
                if !used[p] {
                    used[p] = true;
                    prefix.push(p);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[p] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::with_capacity(m), &mut vec![false; m], &mut out);
        out
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Original SID position emitted at each decode step.
    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(k, &p)| k == p)
    }

    pub fn apply(&self, sid: &SemanticId) -> Result<SemanticId> {
        if sid.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: sid.len(),
            });
        }
        Ok(SemanticId(self.0.iter().map(|&p| sid.0[p]).collect()))
    }
}

/// Restores original position order of a SID decoded under `perm`.
pub fn depermute(permuted: &SemanticId, perm: &Permutation) -> Result<SemanticId> {
    if permuted.len() != perm.len() {
        return Err(Error::LengthMismatch {
            expected: perm.len(),
            got: permuted.len(),
        });
    }
    let mut out = vec![0; perm.len()];
    for (k, &p) in perm.order().iter().enumerate() {
        out[p] = permuted.0[k];
    }
    Ok(SemanticId(out))
}

#[derive(Debug, Clone)]
struct Node {
    parent: Option<usize>,
    depth: usize,
    children: BTreeMap<Code, usize>,
    item: Option<usize>,
}

/// Prefix tree whose root-to-leaf paths are exactly the catalog's SIDs.
///
/// Items are addressed by catalog index. `paths[i]` is item `i`'s SID in the
/// order this trie decodes it (permuted for bound forests).
#[derive(Debug, Clone)]
pub struct DecodingTrie {
    m: usize,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    paths: Vec<SemanticId>,
}

impl DecodingTrie {
    pub fn build(m: usize, paths: Vec<SemanticId>) -> Result<Self> {
        let mut nodes = vec![Node {
            parent: None,
            depth: 0,
            children: BTreeMap::new(),
            item: None,
        }];
        let mut leaves = Vec::with_capacity(paths.len());
        for (item, path) in paths.iter().enumerate() {
            if path.len() != m {
                return Err(Error::LengthMismatch {
                    expected: m,
                    got: path.len(),
                });
            }
            let mut cur = 0;
            for &code in path.codes() {
                cur = match nodes[cur].children.get(&code) {
                    Some(&next) => next,
                    None => {
                        let next = nodes.len();
                        let depth = nodes[cur].depth + 1;
                        nodes.push(Node {
                            parent: Some(cur),
                            depth,
                            children: BTreeMap::new(),
                            item: None,
                        });
                        nodes[cur].children.insert(code, next);
                        next
                    }
                };
            }
            if let Some(prev) = nodes[cur].item {
                return Err(Error::DuplicateSid {
                    sid: path.0.clone(),
                    first: format!("#{prev}"),
                    second: format!("#{item}"),
                });
            }
            nodes[cur].item = Some(item);
            leaves.push(cur);
        }
        Ok(DecodingTrie {
            m,
            nodes,
            leaves,
            paths,
        })
    }

    pub fn from_catalog(catalog: &Catalog) -> Result<Self> {
        Self::build(catalog.m, catalog.sids.values().cloned().collect())
    }

    pub fn depth(&self) -> usize {
        self.m
    }

    /// Number of leaves (items).
    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub const ROOT: usize = 0;

    pub fn path(&self, item: usize) -> &SemanticId {
        &self.paths[item]
    }

    pub fn node_for_prefix(&self, prefix: &[Code]) -> Option<usize> {
        let mut cur = Self::ROOT;
        for code in prefix {
            cur = *self.nodes[cur].children.get(code)?;
        }
        Some(cur)
    }

    /// Children of `node` as `(token, child)` in ascending token order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (Code, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&c, &n)| (c, n))
    }

    pub fn child(&self, node: usize, token: Code) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn leaf_item(&self, node: usize) -> Option<usize> {
        self.nodes[node].item
    }

    pub fn valid_children(&self, prefix: &[Code]) -> Result<Vec<Code>> {
        let node = self
            .node_for_prefix(prefix)
            .ok_or_else(|| Error::UnknownPrefix(prefix.to_vec()))?;
        Ok(self.nodes[node].children.keys().copied().collect())
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownItem(format!("#{item}")))
        }
    }

    /// `2(m - k)` with `k` the longest common prefix length.
    pub fn tree_distance(&self, a: usize, b: usize) -> Result<usize> {
        self.check_item(a)?;
        self.check_item(b)?;
        Ok(self.distance_unchecked(a, b))
    }

    pub(crate) fn distance_unchecked(&self, a: usize, b: usize) -> usize {
        2 * (self.m - self.paths[a].common_prefix(&self.paths[b]))
    }

    /// Edge count of the leaf-to-leaf path, found by walking parent links.
    pub fn path_edges(&self, a: usize, b: usize) -> Result<usize> {
        self.check_item(a)?;
        self.check_item(b)?;
        let (mut x, mut y) = (self.leaves[a], self.leaves[b]);
        let mut edges = 0;
        while x != y {
            if self.nodes[x].depth >= self.nodes[y].depth {
                x = self.nodes[x].parent.expect("non-root has parent");
            } else {
                y = self.nodes[y].parent.expect("non-root has parent");
            }
            edges += 1;
        }
        Ok(edges)
    }

    /// Checks `d(a,c) <= max(d(a,b), d(b,c))` over all triples (small tries) or
    /// `triple_budget` random triples.
    pub fn ultrametric_audit(&self, triple_budget: usize, seed: u64) -> UltrametricAudit {
        let n = self.len();
        let mut audit = UltrametricAudit::default();
        let check = |a: usize, b: usize, c: usize, audit: &mut UltrametricAudit| {
            let (ab, bc, ac) = (
                self.distance_unchecked(a, b),
                self.distance_unchecked(b, c),
                self.distance_unchecked(a, c),
            );
            audit.triples += 1;
            // Every rotation of the triple.
            for (lhs, x, y, w) in [(ac, ab, bc, (a, b, c)), (ab, ac, bc, (a, c, b)), (bc, ab, ac, (b, a, c))] {
                if lhs > x.max(y) {
                    audit.violations += 1;
                    if audit.witnesses.len() < 16 {
                        audit.witnesses.push(w);
                    }
                }
            }
        };
        if n <= EXHAUSTIVE_AUDIT_LIMIT {
            audit.exhaustive = true;
            for a in 0..n {
                for b in a + 1..n {
                    for c in b + 1..n {
                        check(a, b, c, &mut audit);
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..triple_budget {
                let (a, b, c) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n));
                check(a, b, c, &mut audit);
            }
        }
        audit
    }

    /// Per target, counts of other items at each distance `2, 4, .., 2m`.
    pub fn distance_census(&self, targets: &[usize]) -> Result<DistanceCensus> {
        let mut rows = Vec::with_capacity(targets.len());
        for &t in targets {
            self.check_item(t)?;
            let mut counts = vec![0usize; self.m];
            for other in 0..self.len() {
                if other != t {
                    counts[self.distance_unchecked(t, other) / 2 - 1] += 1;
                }
            }
            rows.push((t, counts));
        }
        Ok(DistanceCensus { m: self.m, rows })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UltrametricAudit {
    pub triples: usize,
    pub violations: usize,
    pub exhaustive: bool,
    pub witnesses: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCensus {
    pub m: usize,
    /// `(target, counts)` with `counts[k]` the items at distance `2(k+1)`.
    pub rows: Vec<(usize, Vec<usize>)>,
}

impl DistanceCensus {
    pub fn fraction_with_sibling(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let hits = self.rows.iter().filter(|(_, c)| c[0] > 0).count();
        hits as f64 / self.rows.len() as f64
    }

    pub fn mean_count(&self, distance: usize) -> f64 {
        let k = distance / 2 - 1;
        self.rows.iter().map(|(_, c)| c[k] as f64).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self, catalog: &Catalog) -> String {
        let mut out = String::from("target_item");
        for k in 1..=self.m {
            let _ = write!(out, ",dist_{}", 2 * k);
        }
        out.push('\n');
        for (t, counts) in &self.rows {
            out.push_str(catalog.item_id(*t));
            for c in counts {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// One trie per latent token under permutation binding, else a single trie
/// shared by every latent token.
#[derive(Debug, Clone)]
pub struct TrieForest {
    tries: Vec<DecodingTrie>,
    permutations: Vec<Permutation>,
}

impl TrieForest {
    pub fn single(trie: DecodingTrie) -> Self {
        let m = trie.depth();
        TrieForest {
            tries: vec![trie],
            permutations: vec![Permutation::identity(m)],
        }
    }

    pub fn from_catalog(catalog: &Catalog) -> Result<Self> {
        Ok(Self::single(DecodingTrie::from_catalog(catalog)?))
    }

    /// Trie `k` decodes SIDs permuted by `permutations[k]`.
    pub fn build(catalog: &Catalog, permutations: Vec<Permutation>) -> Result<Self> {
        if permutations.is_empty() {
            return Err(Error::arg("permutations", "at least one permutation is required"));
        }
        let mut tries = Vec::with_capacity(permutations.len());
        for perm in &permutations {
            if perm.len() != catalog.m {
                return Err(Error::LengthMismatch {
                    expected: catalog.m,
                    got: perm.len(),
                });
            }
            let paths = catalog
                .sids
                .values()
                .map(|s| perm.apply(s))
                .collect::<Result<Vec<_>>>()?;
            let trie = DecodingTrie::build(catalog.m, paths);
            debug_assert!(trie.is_ok(), "a permutation is injective on distinct SIDs");
            tries.push(trie?);
        }
        Ok(TrieForest {
            tries,
            permutations,
        })
    }

    /// Forest with every permutation of the SID positions, one per latent token.
    pub fn all_permutations(catalog: &Catalog) -> Result<Self> {
        Self::build(catalog, Permutation::all(catalog.m))
    }

    pub fn is_bound(&self) -> bool {
        self.tries.len() > 1
    }

    pub fn len(&self) -> usize {
        self.tries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tries.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.tries[0].depth()
    }

    pub fn items(&self) -> usize {
        self.tries[0].len()
    }

    /// Trie decoded after `latent` (the shared trie when unbound).
    pub fn trie(&self, latent: Option<u32>) -> &DecodingTrie {
        match latent {
            Some(l) if self.is_bound() => &self.tries[l as usize],
            _ => &self.tries[0],
        }
    }

    pub fn permutation(&self, latent: Option<u32>) -> &Permutation {
        match latent {
            Some(l) if self.is_bound() => &self.permutations[l as usize],
            _ => &self.permutations[0],
        }
    }

    pub fn permutations(&self) -> &[Permutation] {
        &self.permutations
    }
}
