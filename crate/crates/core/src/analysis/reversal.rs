//! Rank reversals between item pairs and the correlation-based upper bound.

use rand::Rng;
use rand_distr::StandardNormal;

use super::report::{Group, StudyReport};
use super::stats::{mean, pearson, variance};
use super::ProbMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReversalRate {
    /// Fraction of non-tied users preferring the first item.
    pub p: f64,
    pub rate: f64,
    pub greater: usize,
    pub less: usize,
    pub ties: usize,
}

/// Probability that two independent users order `(i, j)` oppositely: `2p(1−p)`.
pub fn rank_reversal_rate(probs: &ProbMatrix, i: usize, j: usize) -> Result<ReversalRate> {
    let (a, b) = (probs.row(i), probs.row(j));
    let greater = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let less = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - greater - less;
    if greater + less == 0 {
        return Err(Error::AllTied);
    }
    let p = greater as f64 / (greater + less) as f64;
    Ok(ReversalRate {
        p,
        rate: 2.0 * p * (1.0 - p),
        greater,
        less,
        ties,
    })
}

/// Fraction of ordered non-tied user pairs `(u, u')` that disagree on `(i, j)`.
pub fn rank_reversal_rate_brute(probs: &ProbMatrix, i: usize, j: usize) -> Result<f64> {
    let signs: Vec<i8> = probs
        .row(i)
        .iter()
        .zip(probs.row(j))
        .filter(|(x, y)| x != y)
        .map(|(x, y)| if x > y { 1 } else { -1 })
        .collect();
    if signs.is_empty() {
        return Err(Error::AllTied);
    }
    let mut disagree = 0u64;
    for a in &signs {
        for b in &signs {
            if a != b {
                disagree += 1;
            }
        }
    }
    let n = signs.len() as u64;
    Ok(disagree as f64 / (n * n) as f64)
}

/// `min(4σ²(1−ρ) / (μ² + 2σ²(1−ρ)), 1)`.
pub fn cantelli_bound(mu: f64, sigma2: f64, rho: f64) -> Result<f64> {
    if sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(Error::arg("sigma2", "variance must be positive"));
    }
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::arg("rho", "correlation must lie in [-1, 1]"));
    }
    let spread = 2.0 * sigma2 * (1.0 - rho);
    let denom = mu * mu + spread;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * spread / denom).min(1.0))
}

/// Two correlated Gaussian rows `(μ_a + σz₁, μ_b + σ(ρz₁ + √(1−ρ²)z₂))` clamped to `[0, 1]`.
pub fn correlated_gaussian_rows<R: Rng>(
    rng: &mut R,
    n_users: usize,
    mu: (f64, f64),
    sigma: f64,
    rho: f64,
) -> (Vec<f64>, Vec<f64>) {
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    (0..n_users)
        .map(|_| {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let a = (mu.0 + sigma * z1).clamp(0.0, 1.0);
            let b = (mu.1 + sigma * (rho * z1 + tail * z2)).clamp(0.0, 1.0);
            (a, b)
        })
        .unzip()
}

/// Per-pair empirical reversal rate against the bound; a violation is a rate
/// above the bound plus `3/√n`.
pub fn reversal_bound_audit(probs: &ProbMatrix, pairs: &[(usize, usize)], seed: u64) -> Result<StudyReport> {
    let n = probs.n_users();
    let slack = 3.0 / (n as f64).sqrt();
    let mut report = StudyReport::new("reversal_bound", seed)
        .config("pairs", pairs.len())
        .config("users", n);
    report.columns = [
        "item_i", "item_j", "n", "p", "rate", "mu", "sigma2", "rho", "var_gap", "pred_var_gap", "bound", "violation",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let (mut violations, mut skipped) = (0usize, 0usize);
    let mut worst_gap_err: f64 = 0.0;
    let mut worst_imbalance: f64 = 1.0;
    let mut rates = Vec::new();
    let mut bounds = Vec::new();
    for &(i, j) in pairs {
        let (a, b) = (probs.row(i), probs.row(j));
        let (Ok(rr), Ok(rho)) = (rank_reversal_rate(probs, i, j), pearson(a, b)) else {
            skipped += 1;
            continue;
        };
        let gap: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let mu = mean(&gap).abs();
        let (va, vb) = (probs.variance(i), probs.variance(j));
        let sigma2 = 0.5 * (va + vb);
        let bound = cantelli_bound(mu, sigma2, rho)?;
        let var_gap = variance(&gap);
        let pred = 2.0 * sigma2 * (1.0 - rho);
        if pred > 0.0 {
            worst_gap_err = worst_gap_err.max((var_gap - pred).abs() / pred);
        }
        worst_imbalance = worst_imbalance.max(va.max(vb) / va.min(vb));
        let violated = rr.rate > bound + slack;
        violations += usize::from(violated);
        rates.push(rr.rate);
        bounds.push(bound);
        report.rows.push(vec![
            i.to_string(),
            j.to_string(),
            n.to_string(),
            rr.p.to_string(),
            rr.rate.to_string(),
            mu.to_string(),
            sigma2.to_string(),
            rho.to_string(),
            var_gap.to_string(),
            pred.to_string(),
            bound.to_string(),
            u8::from(violated).to_string(),
        ]);
    }
    report.groups.push(Group::from_values("rate", &rates));
    report.groups.push(Group::from_values("bound", &bounds));
    report.scalar("violations", violations as f64);
    report.scalar("skipped", skipped as f64);
    report.scalar("slack", slack);
    report.scalar("max_gap_variance_rel_err", worst_gap_err);
    report.scalar("max_variance_imbalance", worst_imbalance);
    Ok(report)
}
