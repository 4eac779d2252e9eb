//! Sample summaries and Kolmogorov–Smirnov tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::linalg::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
    /// Standard error of the mean.
    pub se: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let count = xs.len();
        if count == 0 {
            return Self { count, mean: f64::NAN, var: f64::NAN, se: f64::NAN };
        }
        let mean = pairwise_sum(xs) / count as f64;
        if count == 1 {
            return Self { count, mean, var: 0.0, se: f64::NAN };
        }
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&sq) / (count - 1) as f64;
        Self { count, mean, var, se: (var / count as f64).sqrt() }
    }

    pub fn sd(&self) -> f64 {
        self.var.sqrt()
    }

    /// Standard error of the sample variance under a normal law, `var·sqrt(2/(M−1))`.
    pub fn var_se_normal(&self) -> f64 {
        self.var * (2.0 / (self.count as f64 - 1.0)).sqrt()
    }
}

/// One pass/fail check: `|statistic − target| ≤ tolerance`, or
/// `statistic ≥ target` for level checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub statistic: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Criterion {
    pub fn within(name: &str, statistic: f64, target: f64, tolerance: f64) -> Self {
        let pass = (statistic - target).abs() <= tolerance;
        Self { name: name.to_string(), statistic, target, tolerance, pass }
    }

    /// `|statistic − target| ≤ 3 se`.
    pub fn within_se(name: &str, statistic: f64, target: f64, se: f64) -> Self {
        Self::within(name, statistic, target, 3.0 * se)
    }

    /// `|statistic − target| ≤ rel · |target|`.
    pub fn within_rel(name: &str, statistic: f64, target: f64, rel: f64) -> Self {
        Self::within(name, statistic, target, rel * target.abs())
    }

    pub fn at_least(name: &str, statistic: f64, level: f64) -> Self {
        Self { name: name.to_string(), statistic, target: level, tolerance: 0.0, pass: statistic >= level }
    }
}

/// Pearson correlation of two equal-length samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sa = Summary::of(a);
    let sb = Summary::of(b);
    let cross: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - sa.mean) * (y - sb.mean)).collect();
    pairwise_sum(&cross) / (a.len() as f64 - 1.0) / (sa.sd() * sb.sd())
}

/// Asymptotic Kolmogorov tail `P(K > λ) = 2 Σ (−1)^{k−1} exp(−2k²λ²)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    // The tail is 1 to double precision below 0.2, where the series converges slowly.
    if lambda < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test of `xs` against `N(mean, sd²)`, with Stephens'
/// finite-sample correction `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn ks_normal(xs: &[f64], mean: f64, sd: f64) -> KsResult {
    let normal = Normal::new(mean, sd).expect("sd must be positive");
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let rn = n.sqrt();
    KsResult { statistic: d, p_value: kolmogorov_tail((rn + 0.12 + 0.11 / rn) * d) }
}

/// Two-sample KS distance `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn summary_of_small_sample() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.var - 5.0 / 3.0).abs() < 1e-15);
        assert!((s.se - (5.0 / 12.0f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        // Classical critical values: P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01.
        assert!((kolmogorov_tail(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_tail(1.6276) - 0.01).abs() < 1e-3);
        assert_eq!(kolmogorov_tail(0.0), 1.0);
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_normal(&xs, 0.0, 1.0).p_value > 0.01);
        assert!(ks_normal(&xs, 0.2, 1.0).p_value < 1e-6);
    }

    #[test]
    fn two_sample_distance_of_identical_and_disjoint_samples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&a, &[10.0, 11.0]), 1.0);
        assert!((ks_two_sample(&[1.0, 3.0], &[2.0, 4.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn correlation_of_linear_relation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b: Vec<f64> = a.iter().map(|x| -2.0 * x + 1.0).collect();
        assert!((correlation(&a, &b) + 1.0).abs() < 1e-14);
    }
}
