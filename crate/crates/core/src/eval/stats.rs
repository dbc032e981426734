use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{EvalError, Result};

/// Largest sample size for which the null distribution is enumerated
/// exactly; larger samples use the normal approximation.
pub const EXACT_MAX_N: usize = 25;
const MIN_N: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(EvalError::Invalid("non-finite sample value".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    if n < MIN_N {
        return Err(EvalError::TooFewSamples { n, min: MIN_N });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p, method) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * normal.cdf(-z.abs()), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        p_value: p.min(1.0),
        method,
    })
}

/// Exact two-sided p-value by counting sign assignments. Ranks are doubled
/// so that half ranks from ties stay integral.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = (w_plus * 2.0).round() as usize;
    let all = (1u64 << ranks.len()) as f64;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    pub fn from_delta(delta: f64) -> Self {
        let d = delta.abs();
        if d < 0.147 {
            Magnitude::Negligible
        } else if d < 0.33 {
            Magnitude::Small
        } else if d < 0.474 {
            Magnitude::Medium
        } else {
            Magnitude::Large
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub delta: f64,
    pub magnitude: Magnitude,
}

/// Cliff's delta: `(#(a > b) - #(a < b)) / (|a| |b|)` over all pairs.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<EffectSize> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Invalid("cliffs_delta needs two non-empty samples".into()));
    }
    let mut sorted = b.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut dominance: i64 = 0;
    for &x in a {
        let below = sorted.partition_point(|&y| y < x) as i64;
        let above = (sorted.len() - sorted.partition_point(|&y| y <= x)) as i64;
        dominance += below - above;
    }
    let delta = dominance as f64 / (a.len() as f64 * b.len() as f64);
    Ok(EffectSize {
        delta,
        magnitude: Magnitude::from_delta(delta),
    })
}
