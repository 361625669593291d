use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Combined sample size up to which the p-value is computed exactly.
pub const EXACT_MAX_TOTAL: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Pairs with `a > b`, ties counting one half.
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("Mann-Whitney sample contains NaN".into()));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let r_a: f64 = ranks[..n].iter().sum();
    let u_a = r_a - (n * (n + 1)) as f64 / 2.0;
    let u_b = (n * m) as f64 - u_a;
    let centre = (n * m) as f64 / 2.0;
    let (p_value, exact) = if n + m <= EXACT_MAX_TOTAL {
        (exact_p(&ranks, n, (u_a - centre).abs()), true)
    } else {
        (normal_p(&pooled, n, m, u_a), false)
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p_value,
        exact,
    })
}

/// Fraction of all group assignments of the pooled midranks whose U is at
/// least as far from the centre as observed.
fn exact_p(ranks: &[f64], n: usize, observed_dev: f64) -> f64 {
    let total = ranks.len();
    let centre = (n * (total - n)) as f64 / 2.0;
    let offset = (n * (n + 1)) as f64 / 2.0;
    let (mut hits, mut count) = (0u64, 0u64);
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let r: f64 = (0..total).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        count += 1;
        if ((r - offset) - centre).abs() >= observed_dev - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / count as f64
}

fn normal_p(pooled: &[f64], n: usize, m: usize, u: f64) -> f64 {
    let big_n = (n + m) as f64;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nm = (n * m) as f64;
    let var = nm / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let dev = ((u - nm / 2.0).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}
