//! Two-sided Wilcoxon signed-rank test on paired samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences evaluated by exact enumeration.
pub const EXACT_MAX_N: usize = 12;
/// Fewest non-zero differences accepted.
pub const MIN_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub w: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks of `values` (1-based), plus the sizes of tie groups.
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
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Exact two-sided p by enumerating all sign assignments.
pub fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    // doubled ranks are integers even with averaged ties
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = r2.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &r2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let obs = (2.0 * w_plus).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: u64 = counts[..=obs].iter().sum();
    let upper: u64 = counts[obs..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

/// Normal approximation with continuity and tie corrections.
pub fn normal_p(n: usize, ties: &[usize], w_plus: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_corr: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_corr;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

/// Signed-rank test of `a - b`; zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            w: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    if diffs.len() < MIN_N {
        return Err(Error::Input(format!(
            "signed-rank test needs at least {MIN_N} non-zero differences, got {}",
            diffs.len()
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let n = diffs.len();
    let w_minus = (n * (n + 1)) as f64 / 2.0 - w_plus;
    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        (normal_p(n, &ties, w_plus), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        w: w_plus.min(w_minus),
        p_value,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_positive_differences() {
        let a = [2.0, 4.0, 6.0, 8.0, 10.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert!((r.p_value - 0.0625).abs() < 1e-12);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [0.9, 0.8, 1.0];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.method, WilcoxonMethod::Degenerate);
    }

    #[test]
    fn too_few_differences_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
        // symmetric signs around the centre give p = 1
        let a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn exact_matches_brute_force_enumeration() {
        let ranks = [1.0, 2.5, 2.5, 4.0, 5.0, 6.0];
        for obs in [0.0, 3.5, 6.0, 10.5] {
            let mut le = 0;
            let mut ge = 0;
            for mask in 0..64u32 {
                let w: f64 = (0..6).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
                if w <= obs {
                    le += 1;
                }
                if w >= obs {
                    ge += 1;
                }
            }
            let want = (2.0 * le.min(ge) as f64 / 64.0).min(1.0);
            assert!((exact_p(&ranks, obs) - want).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn exact_and_normal_agree_at_twelve(diffs in proptest::collection::vec((1u32..1000, proptest::bool::ANY), 12)) {
            let d: Vec<f64> = diffs.iter().map(|&(m, s)| if s { m as f64 } else { -(m as f64) }).collect();
            let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
            let (ranks, ties) = average_ranks(&abs);
            let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
            let pe = exact_p(&ranks, w_plus);
            let pn = normal_p(12, &ties, w_plus);
            prop_assert!((pe - pn).abs() <= 0.02, "exact {} normal {}", pe, pn);
        }
    }
}
