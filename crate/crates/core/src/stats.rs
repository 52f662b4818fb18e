//! Paired statistics: the Wilcoxon signed-rank test and Bland-Altman
//! agreement analysis.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// z quantile used for the 96% agreement limits.
pub const BLAND_ALTMAN_Z96: f64 = 2.054;

/// Result of the two-sided Wilcoxon signed-rank test. `w_plus` is the sum
/// of ranks of positive differences.
#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub p_value: f64,
    /// Number of non-zero differences actually tested.
    pub n: usize,
    /// True when every difference was zero (p fixed at 1.0).
    pub degenerate: bool,
    /// True when the exact null distribution was used (n <= 15).
    pub exact: bool,
}

/// Largest n for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_MAX_N: usize = 15;

fn average_ranks(abs_diffs: &[f64]) -> Vec<f64> {
    let n = abs_diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_diffs[a].total_cmp(&abs_diffs[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_diffs[order[j + 1]] == abs_diffs[order[i]] {
            j += 1;
        }
        // average of ranks i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p-value via a subset-sum count over doubled ranks
/// (ties make ranks half-integers, so doubling keeps them integral).
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &doubled {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    let patterns = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let le: f64 = counts[..=w2].iter().sum();
    let ge: f64 = counts[w2..].iter().sum();
    (2.0 * (le.min(ge)) / patterns).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; all-zero input is degenerate with p = 1. Exact null
/// distribution for n <= 15, normal approximation with continuity
/// correction and tie correction above.
pub fn wilcoxon_signed_rank(paired_a: &[f64], paired_b: &[f64]) -> Result<WilcoxonResult> {
    if paired_a.len() != paired_b.len() {
        return Err(Error::Dimension(format!(
            "paired samples of length {} and {}",
            paired_a.len(),
            paired_b.len()
        )));
    }
    let diffs: Vec<f64> = paired_a
        .iter()
        .zip(paired_b)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult { w_plus: 0.0, p_value: 1.0, n: 0, degenerate: true, exact: true });
    }
    if n < 5 {
        return Err(Error::Domain(format!(
            "need at least 5 non-zero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    if n <= WILCOXON_EXACT_MAX_N {
        let p = exact_p(&ranks, w_plus);
        return Ok(WilcoxonResult { w_plus, p_value: p, n, degenerate: false, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // tie correction: subtract sum(t^3 - t)/48 from the variance
    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(WilcoxonResult { w_plus, p_value: 1.0, n, degenerate: true, exact: false });
    }
    let delta = w_plus - mean;
    let corrected = delta - 0.5 * delta.signum();
    let z = corrected / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = (2.0 * normal.cdf(-z.abs())).min(1.0);
    Ok(WilcoxonResult { w_plus, p_value: p, n, degenerate: false, exact: false })
}

/// One Bland-Altman case: the mean of the two measurements and their
/// difference (test minus reference).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltmanCase {
    pub mean: f64,
    pub diff: f64,
}

/// Agreement summary: mean bias and 96% limits `mean +- 2.054 sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltmanSummary {
    pub cases: Vec<BlandAltmanCase>,
    pub mean_bias: f64,
    pub sd: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
}

/// Bland-Altman analysis over paired measurements (test, reference).
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltmanSummary> {
    if pairs.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 pairs, got {}", pairs.len())));
    }
    let cases: Vec<BlandAltmanCase> = pairs
        .iter()
        .map(|&(test, reference)| BlandAltmanCase {
            mean: (test + reference) / 2.0,
            diff: test - reference,
        })
        .collect();
    let n = cases.len() as f64;
    let mean_bias = cases.iter().map(|c| c.diff).sum::<f64>() / n;
    let var = cases.iter().map(|c| (c.diff - mean_bias).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    Ok(BlandAltmanSummary {
        cases,
        mean_bias,
        sd,
        lower_limit: mean_bias - BLAND_ALTMAN_Z96 * sd,
        upper_limit: mean_bias + BLAND_ALTMAN_Z96 * sd,
    })
}
