//! Monte Carlo summary statistics. Every reduction runs sequentially in the
//! order samples are pushed, so results do not depend on how replicates were
//! scheduled.

use serde::{Deserialize, Serialize};

/// Welford accumulator for mean and sample variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::default();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// Sample moments of a data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    /// Unbiased variance.
    pub variance: f64,
    /// Standard error of `variance`.
    pub variance_stderr: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                n,
                mean: 0.0,
                variance: 0.0,
                variance_stderr: 0.0,
                skewness: 0.0,
                excess_kurtosis: 0.0,
            };
        }
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let (mut c2, mut c3, mut c4) = (0.0, 0.0, 0.0);
        for x in xs {
            let d = x - mean;
            let d2 = d * d;
            c2 += d2;
            c3 += d2 * d;
            c4 += d2 * d2;
        }
        let (m2, m3, m4) = (c2 / nf, c3 / nf, c4 / nf);
        let variance = if n > 1 { c2 / (nf - 1.0) } else { 0.0 };
        let variance_stderr = if n > 3 {
            ((m4 - m2 * m2 * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0).sqrt()
        } else {
            0.0
        };
        let (skewness, excess_kurtosis) = if m2 > 0.0 {
            (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
        } else {
            (0.0, 0.0)
        };
        Self {
            n,
            mean,
            variance,
            variance_stderr,
            skewness,
            excess_kurtosis,
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance / self.n as f64).sqrt()
        }
    }

    /// Skewness divided by its large-sample standard error `√(6/n)`.
    pub fn skewness_z(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.skewness / (6.0 / self.n as f64).sqrt()
        }
    }

    /// Excess kurtosis divided by its large-sample standard error `√(24/n)`.
    pub fn kurtosis_z(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.excess_kurtosis / (24.0 / self.n as f64).sqrt()
        }
    }
}

/// Sample covariance of paired data with the standard error of the estimate.
pub fn covariance(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 4 {
        return (0.0, 0.0);
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let acc: MeanAccumulator = prods.iter().copied().collect();
    (acc.mean() * nf / (nf - 1.0), acc.stderr())
}

/// Comparison of an estimate against a reference in standard-error units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZCheck {
    pub estimate: f64,
    pub reference: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

impl ZCheck {
    /// Passes when `|estimate − reference| ≤ k · stderr`. With zero standard
    /// error only exact agreement passes.
    pub fn new(estimate: f64, reference: f64, stderr: f64, k: f64) -> Self {
        let diff = (estimate - reference).abs();
        let z = if stderr > 0.0 {
            (estimate - reference) / stderr
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            estimate,
            reference,
            stderr,
            z,
            pass: diff <= k * stderr,
        }
    }
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_two_sample_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
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

/// Asymptotic p-value of the two-sample KS test.
pub fn ks_two_sample_pvalue(a: &[f64], b: &[f64]) -> f64 {
    let d = ks_two_sample_statistic(a, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let en = (na * nb / (na + nb)).sqrt();
    kolmogorov_q((en + 0.12 + 0.11 / en) * d)
}

/// One-sample KS statistic against a continuous CDF.
pub fn ks_one_sample_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    })
}

pub fn ks_one_sample_pvalue(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let d = ks_one_sample_statistic(xs, cdf);
    let en = (xs.len() as f64).sqrt();
    kolmogorov_q((en + 0.12 + 0.11 / en) * d)
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = sign * 2.0 * (a2 * jf * jf).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs().max(1e-300) {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
    }
    // the alternating series failed to settle: λ is tiny
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let acc: MeanAccumulator = xs.iter().copied().collect();
        let m = xs.iter().sum::<f64>() / 5.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert_relative_eq!(acc.mean(), m, epsilon = 1e-14);
        assert_relative_eq!(acc.variance(), v, epsilon = 1e-13);
        assert_relative_eq!(acc.stderr(), (v / 5.0).sqrt(), epsilon = 1e-13);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // classical critical values: Q(1.36) ≈ 0.049, Q(1.63) ≈ 0.010
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_q(1.628) - 0.01).abs() < 5e-4);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn ks_identical_samples() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample_statistic(&a, &a), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 1000.0).collect();
        assert_eq!(ks_two_sample_statistic(&a, &b), 1.0);
    }

    #[test]
    fn ks_uniform_grid_against_uniform_cdf() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let d = ks_one_sample_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert_relative_eq!(d, 0.0005, epsilon = 1e-12);
    }

    #[test]
    fn moments_of_symmetric_data() {
        let m = Moments::of(&[-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.skewness, 0.0);
        assert_relative_eq!(m.variance, 2.5);
        // m4/m2² = 6.8/4
        assert_relative_eq!(m.excess_kurtosis, 6.8 / 4.0 - 3.0, epsilon = 1e-14);
    }

    #[test]
    fn zcheck_with_zero_error() {
        assert!(ZCheck::new(0.0, 0.0, 0.0, 3.0).pass);
        assert!(!ZCheck::new(1e-300, 0.0, 0.0, 3.0).pass);
    }

    proptest! {
        #[test]
        fn covariance_of_self_is_variance(xs in proptest::collection::vec(-10.0f64..10.0, 4..50)) {
            let (c, _) = covariance(&xs, &xs);
            let m = Moments::of(&xs);
            prop_assert!((c - m.variance).abs() <= 1e-10 * (1.0 + m.variance));
        }
    }
}
