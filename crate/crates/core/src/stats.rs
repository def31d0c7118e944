//! Two-sample comparisons for campaign outcomes.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest sample size for which the exact null distribution is used.
const EXACT_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// U statistic of the first sample: pairs where it is larger, ties half.
    pub u: f64,
    /// One-sided p-value for "the first sample tends to be larger".
    pub p_greater: f64,
    /// Whether `p_greater` comes from the exact distribution.
    pub exact: bool,
}

fn u_statistic(x: &[f64], y: &[f64]) -> f64 {
    let mut u = 0.0;
    for a in x {
        for b in y {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u
}

/// Vargha and Delaney's Â12: the probability that a draw from `x` beats a
/// draw from `y`, ties counting half.
pub fn a12(x: &[f64], y: &[f64]) -> f64 {
    assert!(!x.is_empty() && !y.is_empty(), "Â12 needs two non-empty samples");
    u_statistic(x, y) / (x.len() * y.len()) as f64
}

/// Number of arrangements of `n` and `m` untied values giving each U.
fn u_counts(n: usize, m: usize) -> Vec<f64> {
    // f[j][u] for the current n, built up one first-sample element at a time.
    let max = n * m;
    let mut f: Vec<Vec<f64>> = (0..=m)
        .map(|_| {
            let mut v = vec![0.0; max + 1];
            v[0] = 1.0;
            v
        })
        .collect();
    for i in 1..=n {
        let mut g = vec![vec![0.0; max + 1]; m + 1];
        g[0][0] = 1.0;
        for j in 1..=m {
            for u in 0..=i * j {
                // Largest element overall is from x (adds j) or from y.
                let from_x = if u >= j { f[j][u - j] } else { 0.0 };
                g[j][u] = from_x + g[j - 1][u];
            }
        }
        f = g;
    }
    f.swap_remove(m)
}

/// One-sided Mann–Whitney U test of `x` against `y`. Exact when there are
/// no ties and both samples are small, otherwise the normal approximation
/// with tie correction and continuity correction.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> MannWhitney {
    let (n, m) = (x.len(), y.len());
    assert!(n > 0 && m > 0, "Mann–Whitney needs two non-empty samples");
    let u = u_statistic(x, y);
    let mut all: Vec<f64> = x.iter().chain(y).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let j = all[i..].iter().take_while(|v| **v == all[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    if tie_term == 0.0 && n <= EXACT_LIMIT && m <= EXACT_LIMIT {
        let counts = u_counts(n, m);
        let total: f64 = counts.iter().sum();
        let tail: f64 = counts[u as usize..].iter().sum();
        return MannWhitney { u, p_greater: tail / total, exact: true };
    }
    let (nf, mf) = (n as f64, m as f64);
    let big_n = nf + mf;
    let mean = nf * mf / 2.0;
    let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        // Every value equal: no evidence either way.
        return MannWhitney { u, p_greater: 1.0, exact: false };
    }
    let z = (u - mean - 0.5) / var.sqrt();
    let p = 1.0 - Normal::standard().cdf(z);
    MannWhitney { u, p_greater: p, exact: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_samples() {
        let hi = [4.0, 5.0, 6.0];
        let lo = [1.0, 2.0, 3.0];
        let r = mann_whitney_greater(&hi, &lo);
        assert!(r.exact);
        assert_eq!(r.u, 9.0);
        assert!((r.p_greater - 1.0 / 20.0).abs() < 1e-12);
        assert_eq!(mann_whitney_greater(&lo, &hi).p_greater, 1.0);
        assert_eq!(a12(&hi, &lo), 1.0);
        assert_eq!(a12(&lo, &hi), 0.0);
    }

    #[test]
    fn ten_against_ten_fully_separated() {
        let x: Vec<f64> = (10..20).map(f64::from).collect();
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        // One arrangement out of C(20, 10).
        let r = mann_whitney_greater(&x, &y);
        assert!((r.p_greater - 1.0 / 184_756.0).abs() < 1e-15);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(a12(&[1.0, 2.0], &[2.0, 2.0]), 0.25);
        let r = mann_whitney_greater(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]);
        assert!(!r.exact);
        assert_eq!(r.u, 4.5);
        assert!(r.p_greater > 0.4 && r.p_greater < 0.7);
        let same = mann_whitney_greater(&[3.0; 4], &[3.0; 4]);
        assert_eq!(same.p_greater, 1.0);
    }

    #[test]
    fn normal_approximation_is_close_to_exact() {
        let x: Vec<f64> = (0..30).map(|i| f64::from(i) * 1.7 + 3.0).collect();
        let y: Vec<f64> = (0..30).map(|i| f64::from(i) * 1.9 + 0.123).collect();
        let exact = mann_whitney_greater(&x, &y);
        assert!(exact.exact);
        // Perturb one value so a tie appears and the normal path is taken.
        let mut yt = y.clone();
        yt[0] = x[0];
        let approx = mann_whitney_greater(&x, &yt);
        assert!(!approx.exact);
        assert!((exact.p_greater - approx.p_greater).abs() < 0.03, "{exact:?} {approx:?}");
    }
}
