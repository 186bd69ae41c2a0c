//! Small statistics helpers shared by detectors and reports.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WmError};

/// Empirical `q`-quantile taking the higher of the two bracketing order
/// statistics: `sorted[ceil(q · (n − 1))]`.
pub fn upper_quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(WmError::TooFewSamples { need: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(WmError::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let idx = (q * (s.len() - 1) as f64 - 1e-12).ceil().max(0.0) as usize;
    Ok(s[idx.min(s.len() - 1)])
}

/// SplitMix64 finalizer over `(base, salt)`; derives independent sub-seeds.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// `P(B = j)` for `B ~ Bin(n, p)`, computed in log space.
pub fn binomial_pmf(n: usize, j: usize, p: f64) -> f64 {
    if j > n {
        return 0.0;
    }
    if p == 0.0 {
        return if j == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if j == n { 1.0 } else { 0.0 };
    }
    let ln_c = ln_factorial(n) - ln_factorial(j) - ln_factorial(n - j);
    (ln_c + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp()
}

/// `1 − F(count) = P(B > count)`, by direct summation of the upper tail.
pub fn binomial_upper_tail(n: usize, count: usize, p: f64) -> f64 {
    ((count + 1)..=n).map(|j| binomial_pmf(n, j, p)).sum::<f64>().min(1.0)
}

/// Kolmogorov–Smirnov distance between the sample and U(0, 1).
pub fn ks_uniform(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub stderr: f64,
}

/// Mean, sample standard deviation and standard error.
pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, sd: f64::NAN, stderr: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Summary { n, mean, sd: var.sqrt(), stderr: (var / n as f64).sqrt() }
}

pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(WmError::TooFewSamples { need: 1, got: 0 });
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_picks_higher_rank() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(upper_quantile(&xs, 0.5).unwrap(), 3.0);
        assert_eq!(upper_quantile(&xs, 0.0).unwrap(), 1.0);
        assert_eq!(upper_quantile(&xs, 1.0).unwrap(), 4.0);
        assert_eq!(upper_quantile(&[1.0, 2.0, 3.0], 0.5).unwrap(), 2.0);
        assert!(upper_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn binomial_hand_values() {
        assert!((binomial_upper_tail(20, 0, 0.25) - (1.0 - 0.75f64.powi(20))).abs() < 1e-14);
        assert!(binomial_upper_tail(20, 20, 0.25) < 1e-11);
        // P(B > 1) for Bin(3, 1/2) = 4/8
        assert!((binomial_upper_tail(3, 1, 0.5) - 0.5).abs() < 1e-15);
        let total: f64 = (0..=30).map(|j| binomial_pmf(30, j, 0.3)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ks_of_grid_is_small() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&xs) - 0.005).abs() < 1e-12);
        assert!((ks_uniform(&[0.0; 10]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn summary_and_median() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }
}
