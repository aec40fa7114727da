//! Summary statistics and the exact one-sided Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Pairs with a nonzero difference.
    pub n: usize,
    /// Sum of the ranks of positive differences.
    pub w_plus: f64,
    /// `P(W+ >= observed)` under the symmetric null.
    pub p_value: f64,
    pub mean_difference: f64,
}

/// Exact one-sided test of `H1: a tends to exceed b` on paired samples.
///
/// Zero differences are dropped, tied magnitudes share their average rank,
/// and the null distribution is enumerated over all sign assignments.
pub fn wilcoxon_greater(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(contract("paired samples differ in length"));
    }
    let all: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let diffs: Vec<f64> = all.iter().copied().filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n > 24 {
        return Err(contract("exact enumeration limited to 24 pairs"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut end = k;
        while end + 1 < n && diffs[order[end + 1]].abs() == diffs[order[k]].abs() {
            end += 1;
        }
        let avg = (k + end) as f64 / 2.0 + 1.0;
        for &i in &order[k..=end] {
            ranks[i] = avg;
        }
        k = end + 1;
    }
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = 1u64 << n;
    let mut hits = 0u64;
    for mask in 0..total {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= w_plus - 1e-9 {
            hits += 1;
        }
    }
    Ok(Wilcoxon {
        n,
        w_plus,
        p_value: hits as f64 / total as f64,
        mean_difference: mean(&all),
    })
}
