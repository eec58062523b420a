//! Correlation-versus-distance studies, structure statistics, forced
//! transitivity, effective distance and latent usage.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::report::{Group, StudyReport};
use super::stats::kendall_tau_b;
use super::{ProbMatrix, ProbSource, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::model::{log_sum_exp, ScorerParams, Token};
use crate::trie::{DecodingTrie, TrieForest};

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub distance: usize,
    pub pairs: Vec<(usize, usize)>,
    pub available: usize,
    /// Fewer pairs exist than were requested.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub strata: Vec<Stratum>,
}

impl PairSample {
    pub fn all_pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.strata
            .iter()
            .flat_map(|s| s.pairs.iter().map(move |&(i, j)| (i, j, s.distance)))
    }
}

/// Up to `per_stratum` pairs at each requested distance, drawn uniformly
/// without replacement. Distance 0 yields `(i, i)` pairs.
pub fn sample_pairs_by_distance(
    trie: &DecodingTrie,
    distances: &[usize],
    per_stratum: usize,
    seed: u64,
) -> PairSample {
    let n = trie.len();
    let mut by_distance: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &d in distances {
        by_distance.entry(d).or_default();
    }
    if by_distance.contains_key(&0) {
        by_distance.insert(0, (0..n).map(|i| (i, i)).collect());
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = trie.distance_unchecked(i, j);
            if let Some(v) = by_distance.get_mut(&d) {
                if d > 0 {
                    v.push((i, j));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata = distances
        .iter()
        .map(|&d| {
            let all = &by_distance[&d];
            let available = all.len();
            let pairs = if available <= per_stratum {
                all.clone()
            } else {
                let mut idx = sample(&mut rng, available, per_stratum).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|k| all[k]).collect()
            };
            Stratum {
                distance: d,
                pairs,
                available,
                exhausted: available < per_stratum,
            }
        })
        .collect();
    PairSample { strata }
}

/// Mean and spread of pairwise Pearson similarity per distance stratum.
pub fn correlation_study(probs: &ProbMatrix, pairs: &PairSample, source: ProbSource, seed: u64) -> StudyReport {
    let mut report = StudyReport::new("correlation", seed)
        .config("users", probs.n_users())
        .config("prob_source", source);
    report.columns = ["distance", "item_i", "item_j", "r"].iter().map(|s| s.to_string()).collect();
    let mut skipped = 0usize;
    for s in &pairs.strata {
        let rs: Vec<Option<f64>> = s.pairs.par_iter().map(|&(i, j)| probs.similarity(i, j, source)).collect();
        let mut vals = Vec::with_capacity(rs.len());
        for (&(i, j), r) in s.pairs.iter().zip(rs) {
            match r {
                Some(r) => {
                    vals.push(r);
                    report.rows.push(vec![s.distance.to_string(), i.to_string(), j.to_string(), r.to_string()]);
                }
                None => skipped += 1,
            }
        }
        report.groups.push(Group::from_values(s.distance.to_string(), &vals));
        if s.pairs.is_empty() {
            report.scalar(&format!("empty_stratum_{}", s.distance), 1.0);
        }
    }
    report.scalar("skipped", skipped as f64);
    report
}

/// Kendall τ_b between tree distance and pairwise similarity over the sampled
/// pairs at positive distance.
pub fn kendall_structure_study(probs: &ProbMatrix, pairs: &PairSample, source: ProbSource, seed: u64) -> Result<StudyReport> {
    let labelled: Vec<(f64, Option<f64>)> = pairs
        .all_pairs()
        .filter(|p| p.2 > 0)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(i, j, d)| (d as f64, probs.similarity(i, j, source)))
        .collect();
    let skipped = labelled.iter().filter(|p| p.1.is_none()).count();
    let (dist, sim): (Vec<f64>, Vec<f64>) = labelled.into_iter().filter_map(|(d, s)| s.map(|s| (d, s))).unzip();
    let tau = kendall_tau_b(&dist, &sim)?;
    let mut report = StudyReport::new("kendall_structure", seed)
        .config("users", probs.n_users())
        .config("prob_source", source);
    report.scalar("tau_b", tau);
    report.scalar("abs_tau_b", tau.abs());
    report.scalar("pairs", dist.len() as f64);
    report.scalar("skipped", skipped as f64);
    report.columns = vec!["distance".into(), "similarity".into()];
    report.rows = dist.iter().zip(&sim).map(|(d, s)| vec![d.to_string(), s.to_string()]).collect();
    Ok(report)
}

/// Over ordered triples of distinct items (restricted to `items` if given):
/// among those with ρ(i1,i2) > τ and ρ(i2,i3) > τ, the fraction with
/// ρ(i1,i3) > τ and the fraction with d(i1,i3) ≤ δ; and among triples with
/// d(i1,i2) ≤ δ and d(i2,i3) ≤ δ, the fraction with d(i1,i3) ≤ δ.
pub fn transitivity_audit(
    sim: &SimilarityMatrix,
    trie: &DecodingTrie,
    tau: f64,
    delta: usize,
    items: Option<&[usize]>,
    seed: u64,
) -> StudyReport {
    let all: Vec<usize> = items.map_or_else(|| (0..trie.len()).collect(), <[usize]>::to_vec);
    let above = |a: usize, b: usize| sim.get(a, b).is_some_and(|r| r > tau);
    let counts = all
        .par_iter()
        .map(|&i2| {
            let mut c = [0u64; 5];
            for &i1 in &all {
                if i1 == i2 {
                    continue;
                }
                let near12 = trie.distance_unchecked(i1, i2) <= delta;
                let sim12 = above(i1, i2);
                for &i3 in &all {
                    if i3 == i1 || i3 == i2 {
                        continue;
                    }
                    let near13 = trie.distance_unchecked(i1, i3) <= delta;
                    if sim12 && above(i2, i3) {
                        c[0] += 1;
                        c[1] += u64::from(above(i1, i3));
                        c[2] += u64::from(near13);
                    }
                    if near12 && trie.distance_unchecked(i2, i3) <= delta {
                        c[3] += 1;
                        c[4] += u64::from(near13);
                    }
                }
            }
            c
        })
        .reduce(|| [0u64; 5], |a, b| std::array::from_fn(|k| a[k] + b[k]));
    let frac = |num: u64, den: u64| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
    let mut report = StudyReport::new("transitivity", seed)
        .config("tau", tau)
        .config("delta", delta)
        .config("items", all.len());
    report.scalar("premise_triples", counts[0] as f64);
    report.scalar("transitivity_fraction", frac(counts[1], counts[0]));
    report.scalar("premise_near_fraction", frac(counts[2], counts[0]));
    report.scalar("near_triples", counts[3] as f64);
    report.scalar("ultrametric_fraction", frac(counts[4], counts[3]));
    report.scalar("empty", f64::from(u8::from(counts[0] == 0)));
    report
}

fn dominant_latent(rows: &[Vec<f64>], item: usize) -> usize {
    let mut best = 0;
    for l in 1..rows.len() {
        if rows[l][item] > rows[best][item] {
            best = l;
        }
    }
    best
}

/// Tree distance if both items share their dominant latent token for this
/// user, else `2(m+1)`.
pub fn effective_distance(
    params: &ScorerParams,
    forest: &TrieForest,
    i: usize,
    j: usize,
    history: &[Token],
) -> Result<usize> {
    if params.config().latent == 0 {
        return Err(Error::NoLatentVocabulary);
    }
    let rows = params.joint_scores(forest, history)?;
    if i >= forest.items() || j >= forest.items() {
        return Err(Error::UnknownItem(format!("#{}", i.max(j))));
    }
    let (li, lj) = (dominant_latent(&rows, i), dominant_latent(&rows, j));
    if li == lj {
        forest.trie(Some(li as u32)).tree_distance(i, j)
    } else {
        Ok(2 * (forest.depth() + 1))
    }
}

/// Mean effective distance per tree-distance stratum over sampled users and
/// pairs, with the share of (user, pair) cases whose dominant latents differ.
pub fn effective_distance_study(
    params: &ScorerParams,
    forest: &TrieForest,
    pairs: &PairSample,
    histories: &[Vec<Token>],
    seed: u64,
) -> Result<StudyReport> {
    if params.config().latent == 0 {
        return Err(Error::NoLatentVocabulary);
    }
    let far = 2 * (forest.depth() + 1);
    let per_user: Vec<Vec<Vec<usize>>> = histories
        .par_iter()
        .map(|h| {
            let rows = params.joint_scores(forest, h)?;
            let dom: Vec<usize> = (0..forest.items()).map(|i| dominant_latent(&rows, i)).collect();
            Ok(pairs
                .strata
                .iter()
                .map(|s| {
                    s.pairs
                        .iter()
                        .map(|&(i, j)| {
                            if dom[i] == dom[j] {
                                forest.trie(Some(dom[i] as u32)).distance_unchecked(i, j)
                            } else {
                                far
                            }
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut report = StudyReport::new("effective_distance", seed)
        .config("users", histories.len())
        .config("latent", params.config().latent);
    let (mut divergent, mut total) = (0usize, 0usize);
    for (k, s) in pairs.strata.iter().enumerate() {
        let vals: Vec<f64> = per_user.iter().flat_map(|u| u[k].iter().map(|&d| d as f64)).collect();
        divergent += vals.iter().filter(|&&d| d == far as f64).count();
        total += vals.len();
        report.groups.push(Group::from_values(s.distance.to_string(), &vals));
    }
    report.scalar("divergent_fraction", if total == 0 { f64::NAN } else { divergent as f64 / total as f64 });
    Ok(report)
}

/// `(1/M')ρ + (1 − 1/M')ρ_low`.
pub fn latte_effective_correlation(rho: f64, rho_low: f64, latent: usize) -> Result<f64> {
    if latent == 0 {
        return Err(Error::NoLatentVocabulary);
    }
    if rho_low > rho {
        return Err(Error::arg("rho_low", "must not exceed rho"));
    }
    if !(-1.0..=1.0).contains(&rho) || !(-1.0..=1.0).contains(&rho_low) {
        return Err(Error::arg("rho", "correlations must lie in [-1, 1]"));
    }
    let w = 1.0 / latent as f64;
    let out = w * rho + (1.0 - w) * rho_low;
    debug_assert!(latent == 1 || rho_low == rho || out < rho);
    Ok(out)
}

/// Mean over users of the latent-step distribution `P(ℓ | u)`.
pub fn latent_usage_distribution(params: &ScorerParams, histories: &[Vec<Token>]) -> Result<Vec<f64>> {
    let latent = params.config().latent;
    if latent == 0 {
        return Err(Error::NoLatentVocabulary);
    }
    if histories.is_empty() {
        return Err(Error::arg("histories", "no users"));
    }
    let dists: Vec<Vec<f64>> = histories
        .par_iter()
        .map(|h| {
            let enc = params.encode_user(h)?;
            Ok(params.latent_log_probs(&enc).into_iter().map(f64::exp).collect())
        })
        .collect::<Result<_>>()?;
    let n = histories.len() as f64;
    Ok((0..latent).map(|l| dists.iter().map(|d| d[l]).sum::<f64>() / n).collect())
}

/// Share of each latent token among every user's `top_k` highest-scoring
/// generated `(latent, item)` paths.
pub fn generated_latent_usage(
    params: &ScorerParams,
    forest: &TrieForest,
    histories: &[Vec<Token>],
    top_k: usize,
) -> Result<Vec<f64>> {
    let latent = params.config().latent;
    if latent == 0 {
        return Err(Error::NoLatentVocabulary);
    }
    if histories.is_empty() || top_k == 0 {
        return Err(Error::arg("histories", "need users and top_k >= 1"));
    }
    let counts: Vec<Vec<usize>> = histories
        .par_iter()
        .map(|h| {
            let rows = params.joint_scores(forest, h)?;
            let mut paths: Vec<(f64, usize, usize)> = rows
                .iter()
                .enumerate()
                .flat_map(|(l, r)| r.iter().enumerate().map(move |(i, &s)| (s, l, i)))
                .collect();
            paths.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut c = vec![0usize; latent];
            for p in paths.iter().take(top_k) {
                c[p.1] += 1;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let total: usize = counts.iter().flatten().sum();
    Ok((0..latent)
        .map(|l| counts.iter().map(|c| c[l]).sum::<usize>() as f64 / total as f64)
        .collect())
}

/// Mean over users of the latent posterior `P(ℓ | u, i)` given each user's
/// observed item `targets[u]`.
pub fn posterior_latent_usage(
    params: &ScorerParams,
    forest: &TrieForest,
    histories: &[Vec<Token>],
    targets: &[usize],
) -> Result<Vec<f64>> {
    let latent = params.config().latent;
    if latent == 0 {
        return Err(Error::NoLatentVocabulary);
    }
    if histories.is_empty() || histories.len() != targets.len() {
        return Err(Error::arg("targets", "need one target per user"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= forest.items()) {
        return Err(Error::UnknownItem(format!("#{t}")));
    }
    let posts: Vec<Vec<f64>> = histories
        .par_iter()
        .zip(targets.par_iter())
        .map(|(h, &t)| {
            let rows = params.joint_scores(forest, h)?;
            let col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
            let z = log_sum_exp(&col);
            Ok(col.into_iter().map(|c| (c - z).exp()).collect())
        })
        .collect::<Result<_>>()?;
    let n = histories.len() as f64;
    Ok((0..latent).map(|l| posts.iter().map(|p| p[l]).sum::<f64>() / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, SemanticId};
    use crate::model::{history_tokens, Aggregation, ScorerConfig};
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn grid_catalog() -> Catalog {
        let sids = (0..27u32).map(|x| (format!("g{x:02}"), SemanticId(vec![x / 9, (x / 3) % 3, x % 3])));
        Catalog::from_sids(3, 3, sids).unwrap()
    }

    /// Rows built from shared per-prefix factors, so correlation falls with distance.
    fn hierarchical_rows(cat: &Catalog, users: usize, seed: u64) -> ProbMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factor: BTreeMap<Vec<u32>, Vec<f64>> = BTreeMap::new();
        let mut draw = |key: Vec<u32>, rng: &mut ChaCha8Rng| -> Vec<f64> {
            factor
                .entry(key)
                .or_insert_with(|| (0..users).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .clone()
        };
        let rows = (0..cat.len())
            .map(|i| {
                let c = cat.sid(i).codes().to_vec();
                let a = draw(c[..1].to_vec(), &mut rng);
                let b = draw(c[..2].to_vec(), &mut rng);
                let l = draw(c.clone(), &mut rng);
                (0..users).map(|u| 0.5 + 0.04 * (a[u] + b[u] + l[u])).map(|p: f64| p.clamp(0.0, 1.0)).collect()
            })
            .collect();
        ProbMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn pair_sampling() {
        let cat = Catalog::from_sids(
            3,
            2,
            vec![("a".to_string(), SemanticId(vec![0, 0, 0])), ("b".to_string(), SemanticId(vec![0, 0, 1]))],
        )
        .unwrap();
        let trie = DecodingTrie::from_catalog(&cat).unwrap();
        let s = sample_pairs_by_distance(&trie, &[2, 4], 10, 0);
        assert_eq!(s.strata[0].pairs, vec![(0, 1)]);
        assert!(s.strata[0].exhausted);
        assert!(s.strata[1].pairs.is_empty());

        let cat = grid_catalog();
        let trie = DecodingTrie::from_catalog(&cat).unwrap();
        let s = sample_pairs_by_distance(&trie, &[2, 4, 6], 20, 5);
        for st in &s.strata {
            assert_eq!(st.pairs.len(), 20);
            assert!(!st.exhausted);
            for &(i, j) in &st.pairs {
                assert_eq!(trie.tree_distance(i, j).unwrap(), st.distance);
            }
        }
        assert_eq!(s, sample_pairs_by_distance(&trie, &[2, 4, 6], 20, 5));
    }

    #[test]
    fn identical_rows_correlate_perfectly() {
        let cat = grid_catalog();
        let trie = DecodingTrie::from_catalog(&cat).unwrap();
        let base: Vec<f64> = (0..30).map(|u| 0.01 + 0.001 * ((u * 7) % 13) as f64).collect();
        let rows = (0..cat.len()).map(|i| base.iter().map(|b| b * (1.0 + i as f64 * 0.1)).collect()).collect();
        let probs = ProbMatrix::from_rows(rows).unwrap();
        let pairs = sample_pairs_by_distance(&trie, &[0, 2, 4, 6], 15, 1);
        let r = correlation_study(&probs, &pairs, ProbSource::Prob, 1);
        for g in &r.groups {
            assert!((g.mean - 1.0).abs() < 1e-12, "{g:?}");
        }
        assert_eq!(r.group("0").unwrap().mean, 1.0);
    }

    #[test]
    fn structure_dominated_tau_is_extreme() {
        let cat = grid_catalog();
        let trie = DecodingTrie::from_catalog(&cat).unwrap();
        let probs = hierarchical_rows(&cat, 4000, 2);
        let pairs = sample_pairs_by_distance(&trie, &[2, 4, 6], 40, 3);
        let corr = correlation_study(&probs, &pairs, ProbSource::Prob, 3);
        let means: Vec<f64> = corr.groups.iter().map(|g| g.mean).collect();
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
        let k = kendall_structure_study(&probs, &pairs, ProbSource::Prob, 3).unwrap();
        // With distance classes fully separated and no similarity ties the
        // most negative attainable τ_b is −√((n0 − n1)/n0).
        let sizes: Vec<f64> = pairs.strata.iter().map(|s| s.pairs.len() as f64).collect();
        let n: f64 = sizes.iter().sum();
        let n0 = n * (n - 1.0) / 2.0;
        let n1: f64 = sizes.iter().map(|k| k * (k - 1.0) / 2.0).sum();
        let floor = -((n0 - n1) / n0).sqrt();
        assert!((k.get("tau_b").unwrap() - floor).abs() < 1e-12, "{:?}", k.get("tau_b"));
    }

    #[test]
    fn shuffled_similarities_have_null_tau() {
        let cat = grid_catalog();
        let trie = DecodingTrie::from_catalog(&cat).unwrap();
        let probs = hierarchical_rows(&cat, 500, 4);
        let pairs = sample_pairs_by_distance(&trie, &[2, 4, 6], 60, 4);
        let k = kendall_structure_study(&probs, &pairs, ProbSource::Prob, 4).unwrap();
        let dist: Vec<f64> = k.rows.iter().map(|r| r[0].parse().unwrap()).collect();
        let mut sim: Vec<f64> = k.rows.iter().map(|r| r[1].parse().unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            sim.shuffle(&mut rng);
            let t = kendall_tau_b(&dist, &sim).unwrap();
            assert!(t.abs() < 0.2, "{t}");
        }
    }

    #[test]
    fn ultrametric_fraction_is_one_and_random_similarity_is_intransitive() {
        let cat = grid_catalog();
        let trie = DecodingTrie::from_catalog(&cat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = cat.len();
        let raw: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sim = SimilarityMatrix::from_fn(n, |i, j| Some(if i == j { 1.0 } else { raw[i.min(j) * n + i.max(j)] }));
        for delta in [2, 4] {
            let r = transitivity_audit(&sim, &trie, 0.3, delta, None, 6);
            assert_eq!(r.get("ultrametric_fraction"), Some(1.0));
            let t = r.get("transitivity_fraction").unwrap();
            assert!(t < 1.0, "{t}");
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(latte_effective_correlation(0.7, 0.2, 1).unwrap(), 0.7);
        assert!((latte_effective_correlation(0.9, 0.1, 8).unwrap() - 0.2).abs() < 1e-12);
        assert!(latte_effective_correlation(0.1, 0.5, 4).is_err());
        let mut prev = f64::INFINITY;
        for m in 1..20 {
            let v = latte_effective_correlation(0.8, -0.3, m).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    fn small_model(latent: usize) -> (Catalog, TrieForest, ScorerParams) {
        let cat = grid_catalog();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let mut cfg = ScorerConfig::new(3, 3, latent);
        cfg.d = 6;
        cfg.hidden = 8;
        cfg.seed = 21;
        (cat, forest, ScorerParams::init(cfg).unwrap())
    }

    #[test]
    fn effective_distance_study_agrees_with_pointwise() {
        let (cat, forest, p) = small_model(3);
        let trie = forest.trie(None).clone();
        let pairs = sample_pairs_by_distance(&trie, &[2, 4, 6], 5, 1);
        let hs: Vec<_> = [[3, 9], [0, 26]].iter().map(|h| history_tokens(&cat, h)).collect();
        let rep = effective_distance_study(&p, &forest, &pairs, &hs, 0).unwrap();
        for s in &pairs.strata {
            let vals: Vec<f64> = hs
                .iter()
                .flat_map(|h| s.pairs.iter().map(|&(i, j)| effective_distance(&p, &forest, i, j, h).unwrap() as f64))
                .collect();
            let g = rep.group(&s.distance.to_string()).unwrap();
            assert_eq!(g.n, vals.len());
            assert!((g.mean - crate::analysis::stats::mean(&vals)).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_distance_cases() {
        let (cat, forest, p) = small_model(1);
        let h = history_tokens(&cat, &[3, 9]);
        for (i, j) in [(0, 1), (0, 26), (4, 4)] {
            assert_eq!(effective_distance(&p, &forest, i, j, &h).unwrap(), forest.trie(None).tree_distance(i, j).unwrap());
        }
        let (cat, forest, p) = small_model(3);
        let h = history_tokens(&cat, &[3, 9]);
        assert_eq!(effective_distance(&p, &forest, 5, 5, &h).unwrap(), 0);
        let rows = p.joint_scores(&forest, &h).unwrap();
        let (i, j) = (0..27)
            .flat_map(|i| (0..27).map(move |j| (i, j)))
            .find(|&(i, j)| dominant_latent(&rows, i) != dominant_latent(&rows, j))
            .expect("generic params split dominant latents somewhere");
        assert_eq!(effective_distance(&p, &forest, i, j, &h).unwrap(), 8);
        let (_, forest0, p0) = small_model(0);
        assert!(effective_distance(&p0, &forest0, 0, 1, &h).is_err());
    }

    #[test]
    fn zero_params_use_latents_uniformly() {
        let cat = grid_catalog();
        let forest = TrieForest::from_catalog(&cat).unwrap();
        let mut cfg = ScorerConfig::new(3, 3, 4);
        cfg.d = 4;
        cfg.hidden = 4;
        let p = ScorerParams::zeros(cfg).unwrap();
        let hs: Vec<_> = (0..6).map(|u| history_tokens(&cat, &[u])).collect();
        let usage = latent_usage_distribution(&p, &hs).unwrap();
        assert!(usage.iter().all(|&u| u == 0.25));
        let gen = generated_latent_usage(&p, &forest, &hs, 8).unwrap();
        assert!((gen.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_usage_matches_joint_oracle() {
        let (cat, forest, p) = small_model(3);
        let hs: Vec<_> = [[0, 5], [7, 26], [13, 2]].iter().map(|h| history_tokens(&cat, h)).collect();
        let targets = [4, 19, 13];
        let post = posterior_latent_usage(&p, &forest, &hs, &targets).unwrap();
        let mut oracle = [0.0; 3];
        for (h, &t) in hs.iter().zip(&targets) {
            let joint: Vec<f64> = (0..3)
                .map(|l| p.item_log_prob(&forest, h, t, Some(l), Aggregation::Sum).unwrap().exp())
                .collect();
            let z: f64 = joint.iter().sum();
            for l in 0..3 {
                oracle[l] += joint[l] / z / 3.0;
            }
        }
        for l in 0..3 {
            assert!((post[l] - oracle[l]).abs() < 1e-12, "{post:?} vs {oracle:?}");
        }
        assert!(posterior_latent_usage(&p, &forest, &hs, &[0, 1]).is_err());
        let (_, _, zero) = small_model(0);
        assert!(posterior_latent_usage(&zero, &forest, &hs, &targets).is_err());
    }
}
