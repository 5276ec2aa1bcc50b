//! Non-parametric comparison of models' encoded norms.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::assessment::{NormRecord, NormStatus, Outcome};
use crate::scale::LikertLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    ExactPermutation,
    NormalApprox,
    ChiSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub method: TestMethod,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("all paired differences are zero; the test is undefined")]
    AllZeroDifferences,
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("Likert code {0} outside 1..=5")]
    BadCode(u8),
    #[error("Friedman test needs at least 3 models, got {0}")]
    TooFewModels(usize),
    #[error("Friedman test needs at least 2 blocks, got {0}")]
    TooFewBlocks(usize),
    #[error("block {0} has missing cells")]
    MissingCells(usize),
}

/// Likert codes of two models on a shared, ordered set of vignettes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedSample {
    pub vignette_ids: Vec<String>,
    pub a_codes: Vec<u8>,
    pub b_codes: Vec<u8>,
}

impl PairedSample {
    pub fn new(vignette_ids: Vec<String>, a_codes: Vec<u8>, b_codes: Vec<u8>) -> Result<Self, StatsError> {
        if a_codes.len() != b_codes.len() || vignette_ids.len() != a_codes.len() {
            return Err(StatsError::LengthMismatch(a_codes.len(), b_codes.len()));
        }
        if a_codes.is_empty() {
            return Err(StatsError::EmptySample);
        }
        if let Some(bad) = a_codes.iter().chain(&b_codes).find(|c| !(1..=5).contains(*c)) {
            return Err(StatsError::BadCode(*bad));
        }
        Ok(Self {
            vignette_ids,
            a_codes,
            b_codes,
        })
    }

    /// Modal codes on vignettes where both models are `Consistent`, ordered
    /// as in `a`.
    pub fn from_consistent(a: &[NormRecord], b: &[NormRecord]) -> Result<Self, StatsError> {
        let b_norms: HashMap<&str, LikertLevel> = b
            .iter()
            .filter_map(|r| r.norm().map(|l| (r.vignette_id.as_str(), l)))
            .collect();
        let mut ids = Vec::new();
        let mut ac = Vec::new();
        let mut bc = Vec::new();
        for r in a {
            if let (Some(la), Some(lb)) = (r.norm(), b_norms.get(r.vignette_id.as_str())) {
                ids.push(r.vignette_id.clone());
                ac.push(la.code());
                bc.push(lb.code());
            }
        }
        Self::new(ids, ac, bc)
    }

    /// Per-prompt codes where both models gave a valid answer to the same
    /// (vignette, variant).
    pub fn from_raw(a: &[NormRecord], b: &[NormRecord]) -> Result<Self, StatsError> {
        let b_by_id: HashMap<&str, &NormRecord> =
            b.iter().map(|r| (r.vignette_id.as_str(), r)).collect();
        let mut ids = Vec::new();
        let mut ac = Vec::new();
        let mut bc = Vec::new();
        for ra in a {
            let Some(rb) = b_by_id.get(ra.vignette_id.as_str()) else {
                continue;
            };
            for (variant, va) in &ra.verdicts {
                let pair = (va.level(), rb.verdicts.get(variant).and_then(|v| v.level()));
                if let (Some(la), Some(lb)) = pair {
                    ids.push(format!("{}#{variant}", ra.vignette_id));
                    ac.push(la.code());
                    bc.push(lb.code());
                }
            }
        }
        Self::new(ids, ac, bc)
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a_codes
            .iter()
            .zip(&self.b_codes)
            .map(|(a, b)| f64::from(*a) - f64::from(*b))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMode {
    #[default]
    Auto,
    Exact,
    Approx,
}

/// Largest n_effective for which `Auto` enumerates the exact distribution.
pub const DEFAULT_EXACT_MAX_N: usize = 25;

pub fn wilcoxon_signed_rank(sample: &PairedSample, mode: WilcoxonMode) -> Result<TestResult, StatsError> {
    wilcoxon_from_differences(&sample.differences(), mode, DEFAULT_EXACT_MAX_N)
}

/// Midranks of `values` (1-based, ties averaged), returned doubled so they
/// stay integral, together with the tie group sizes.
fn doubled_midranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 average to (i + j + 2) / 2
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Wilcoxon signed-rank test on paired differences. Zero differences are
/// discarded; `W = min(W+, W-)`; the p-value is two-sided.
pub fn wilcoxon_from_differences(
    diffs: &[f64],
    mode: WilcoxonMode,
    exact_max_n: usize,
) -> Result<TestResult, StatsError> {
    if diffs.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(StatsError::AllZeroDifferences);
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks2, ties) = doubled_midranks(&abs);
    let total2: u64 = ranks2.iter().sum();
    let plus2: u64 = nonzero
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w2 = plus2.min(total2 - plus2);
    let statistic = w2 as f64 / 2.0;

    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Approx => false,
        WilcoxonMode::Auto => n <= exact_max_n,
    };
    let (p_value, method) = if exact {
        (exact_p(&ranks2, w2), TestMethod::ExactPermutation)
    } else {
        (approx_p(n, &ties, statistic), TestMethod::NormalApprox)
    };
    Ok(TestResult {
        statistic,
        n_effective: n,
        p_value,
        method,
    })
}

/// Two-sided p from the exact null distribution of the signed-rank sum, built
/// by dynamic programming over doubled ranks (each sign equally likely).
fn exact_p(ranks2: &[u64], w2: u64) -> f64 {
    let total: usize = ranks2.iter().sum::<u64>() as usize;
    let mut dist = vec![0.0f64; total + 1];
    dist[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        reach += r;
        for s in (0..=reach).rev() {
            let with = if s >= r { dist[s - r] } else { 0.0 };
            dist[s] = 0.5 * dist[s] + 0.5 * with;
        }
    }
    // null distribution is symmetric about total/2, so P(min(W+,W-) <= w)
    // is twice the lower tail, saturating at 1 when w is the centre
    let lower: f64 = dist[..=(w2 as usize)].iter().sum();
    (2.0 * lower).min(1.0)
}

fn approx_p(n: usize, ties: &[usize], w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = (nf * (nf + 1.0) * (2.0 * nf + 1.0) - tie_term / 2.0) / 24.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.cdf(-z)).min(1.0)
}

/// Friedman test over `blocks` (rows = vignettes, columns = models).
pub fn friedman_test(blocks: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    let n = blocks.len();
    let k = blocks.first().map_or(0, Vec::len);
    if k < 3 {
        return Err(StatsError::TooFewModels(k));
    }
    if n < 2 {
        return Err(StatsError::TooFewBlocks(n));
    }
    let mut rank_sums = vec![0.0f64; k];
    for (i, row) in blocks.iter().enumerate() {
        if row.len() != k || row.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::MissingCells(i));
        }
        let (ranks2, _) = doubled_midranks(row);
        for (sum, r) in rank_sums.iter_mut().zip(ranks2) {
            *sum += r as f64 / 2.0;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let chi2 = (12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0)).max(0.0);
    let dist = ChiSquared::new(kf - 1.0).expect("k >= 3 gives positive df");
    Ok(TestResult {
        statistic: chi2,
        n_effective: n,
        p_value: dist.sf(chi2).clamp(0.0, 1.0),
        method: TestMethod::ChiSquare,
    })
}

/// Vignettes where both models hold the same consistent norm.
pub fn agreement_count(a: &[NormRecord], b: &[NormRecord]) -> usize {
    let b_norms: HashMap<&str, LikertLevel> = b
        .iter()
        .filter_map(|r| r.norm().map(|l| (r.vignette_id.as_str(), l)))
        .collect();
    a.iter()
        .filter(|r| {
            r.norm()
                .is_some_and(|l| b_norms.get(r.vignette_id.as_str()) == Some(&l))
        })
        .count()
}

/// Counts per level plus `no_answer` (held and insufficient records).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub levels: [usize; 5],
    pub no_answer: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.levels.iter().sum::<usize>() + self.no_answer
    }

    pub fn get(&self, outcome: Outcome) -> usize {
        match outcome {
            Outcome::Level(l) => self.levels[l.index()],
            Outcome::NoAnswer => self.no_answer,
        }
    }
}

pub fn distribution_summary(records: &[NormRecord]) -> OutcomeCounts {
    let mut out = OutcomeCounts::default();
    for r in records {
        match (r.status, r.norm()) {
            (NormStatus::Consistent, Some(l)) => out.levels[l.index()] += 1,
            _ => out.no_answer += 1,
        }
    }
    out
}
