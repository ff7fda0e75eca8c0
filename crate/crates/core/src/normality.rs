//! Summary moments and normality tests for replicate statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Smallest sample size for the Jarque–Bera test.
pub const MIN_JB_SIZE: usize = 8;
/// Smallest sample size for the Lilliefors test.
pub const MIN_KS_SIZE: usize = 20;

/// Upper critical points of the Stephens-modified Lilliefors statistic
/// `D* = D (√n − 0.01 + 0.85/√n)` for a normal law with estimated mean and
/// variance, as `(level, critical value)`.
pub const LILLIEFORS_CRITICAL: [(f64, f64); 5] = [
    (0.15, 0.775),
    (0.10, 0.819),
    (0.05, 0.895),
    (0.025, 0.955),
    (0.01, 1.035),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance (`n − 1` denominator); 0 when `n = 1`.
    pub variance: f64,
    #[serde(with = "nan_as_null")]
    pub skewness: f64,
    #[serde(with = "nan_as_null")]
    pub excess_kurtosis: f64,
}

/// JSON has no NaN; undefined moments are written as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Moments of `values`. Skewness and kurtosis use the plain (biased) central
/// moments, as in the Jarque–Bera statistic; they are NaN for constant input.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::param("summary of an empty sample"));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    Ok(Summary {
        n,
        mean,
        variance: if n > 1 { m2 * nf / (nf - 1.0) } else { 0.0 },
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TestOutcome {
    Computed {
        statistic: f64,
        p_value: f64,
        /// True when only `p ≥ p_value` is known.
        p_value_lower_bound: bool,
        reject_at_1pct: bool,
    },
    Insufficient {
        n: usize,
        required: usize,
    },
}

impl TestOutcome {
    /// `Some(true)` for a rejection at 1 %, `None` when not computed.
    pub fn rejects(&self) -> Option<bool> {
        match self {
            TestOutcome::Computed { reject_at_1pct, .. } => Some(*reject_at_1pct),
            TestOutcome::Insufficient { .. } => None,
        }
    }

    pub fn p_value(&self) -> Option<f64> {
        match self {
            TestOutcome::Computed { p_value, .. } => Some(*p_value),
            TestOutcome::Insufficient { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub summary: Summary,
    pub jarque_bera: TestOutcome,
    pub lilliefors: TestOutcome,
}

impl NormalityReport {
    /// True iff both tests were computed and neither rejects at 1 %.
    pub fn accepts(&self) -> bool {
        self.jarque_bera.rejects() == Some(false) && self.lilliefors.rejects() == Some(false)
    }

    /// True iff a computed test rejects at 1 %.
    pub fn rejects(&self) -> bool {
        self.jarque_bera.rejects() == Some(true) || self.lilliefors.rejects() == Some(true)
    }
}

/// Jarque–Bera and Lilliefors tests of `values` against a normal law with
/// fitted mean and variance.
pub fn normality_tests(values: &[f64]) -> Result<NormalityReport> {
    let summary = summarize(values)?;
    if values.len() > 1 && !(summary.variance > 0.0) {
        return Err(Error::Degenerate("normality test of a constant sample".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("normality test input contains non-finite values"));
    }
    let jarque_bera = if summary.n < MIN_JB_SIZE {
        TestOutcome::Insufficient {
            n: summary.n,
            required: MIN_JB_SIZE,
        }
    } else {
        jarque_bera(&summary)
    };
    let lilliefors = if summary.n < MIN_KS_SIZE {
        TestOutcome::Insufficient {
            n: summary.n,
            required: MIN_KS_SIZE,
        }
    } else {
        lilliefors(values, &summary)?
    };
    Ok(NormalityReport {
        summary,
        jarque_bera,
        lilliefors,
    })
}

fn jarque_bera(s: &Summary) -> TestOutcome {
    let statistic = s.n as f64 / 6.0 * (s.skewness.powi(2) + s.excess_kurtosis.powi(2) / 4.0);
    // Chi-square(2) survival function.
    let p_value = (-statistic / 2.0).exp();
    TestOutcome::Computed {
        statistic,
        p_value,
        p_value_lower_bound: false,
        reject_at_1pct: p_value < 0.01,
    }
}

fn lilliefors(values: &[f64], s: &Summary) -> Result<TestOutcome> {
    let fitted = Normal::new(s.mean, s.variance.sqrt())
        .map_err(|e| Error::Degenerate(format!("fitted normal: {e}")))?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let d = ks_distance_sorted(&sorted, |x| fitted.cdf(x));
    let n = s.n as f64;
    let modified = d * (n.sqrt() - 0.01 + 0.85 / n.sqrt());
    let critical_1pct = LILLIEFORS_CRITICAL[4].1;
    let (p_value, p_value_lower_bound) = lilliefors_p_value(d, s.n, modified);
    Ok(TestOutcome::Computed {
        statistic: d,
        p_value,
        p_value_lower_bound,
        reject_at_1pct: modified > critical_1pct,
    })
}

/// Dallal–Wilkinson approximation below 0.10, interpolation in the critical
/// table between 0.10 and 0.15, and the lower bound 0.15 above that.
fn lilliefors_p_value(d: f64, n: usize, modified: f64) -> (f64, bool) {
    let (kd, nd) = if n > 100 {
        (d * (n as f64 / 100.0).powf(0.49), 100.0)
    } else {
        (d, n as f64)
    };
    let dw = (-7.01256 * kd * kd * (nd + 2.78019) + 2.99587 * kd * (nd + 2.78019).sqrt() - 0.122119
        + 0.974598 / nd.sqrt()
        + 1.67997 / nd)
        .exp();
    if dw <= 0.10 {
        return (dw, false);
    }
    let (p_hi, c_lo) = LILLIEFORS_CRITICAL[0];
    let (p_lo, c_hi) = LILLIEFORS_CRITICAL[1];
    if modified >= c_hi {
        (p_lo, false)
    } else if modified > c_lo {
        (p_hi + (modified - c_lo) / (c_hi - c_lo) * (p_lo - p_hi), false)
    } else {
        (p_hi, true)
    }
}

/// Kolmogorov–Smirnov distance between the empirical law of `sorted`
/// (ascending) and `cdf`.
pub fn ks_distance_sorted<F: FnMut(f64) -> f64>(sorted: &[f64], mut cdf: F) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Kolmogorov–Smirnov distance between two empirical laws.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
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
    use crate::rng::StreamKey;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = StreamKey::new(seed).rng();
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn moments_of_small_sample() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!(s.skewness.abs() < 1e-15);
        assert!((s.excess_kurtosis - (-1.36)).abs() < 1e-12);
    }

    #[test]
    fn single_value_is_insufficient() {
        let r = normality_tests(&[0.3]).unwrap();
        assert!(matches!(r.jarque_bera, TestOutcome::Insufficient { n: 1, required: 8 }));
        assert!(matches!(r.lilliefors, TestOutcome::Insufficient { n: 1, required: 20 }));
        assert!(!r.accepts());
        assert!(!r.rejects());
    }

    #[test]
    fn constant_input_is_an_error() {
        assert!(matches!(normality_tests(&[2.0; 50]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn calibrated_on_normal_draws() {
        let accepted = (0..100)
            .filter(|&t| normality_tests(&normals(1000 + t, 10_000)).unwrap().accepts())
            .count();
        assert!(accepted >= 95, "accepted {accepted} of 100");
    }

    #[test]
    fn rejects_centered_chi_square() {
        let v: Vec<f64> = normals(7, 10_000).iter().map(|z| z * z - 1.0).collect();
        let r = normality_tests(&v).unwrap();
        assert_eq!(r.jarque_bera.rejects(), Some(true));
        assert_eq!(r.lilliefors.rejects(), Some(true));
    }

    #[test]
    fn dallal_wilkinson_matches_table_near_ten_percent() {
        // At the 10 % critical point of D* the approximation should give ~0.10.
        for n in [30usize, 100, 1000] {
            let nf = n as f64;
            let d = 0.819 / (nf.sqrt() - 0.01 + 0.85 / nf.sqrt());
            let (kd, nd) = if n > 100 { (d * (nf / 100.0).powf(0.49), 100.0) } else { (d, nf) };
            let p = (-7.01256 * kd * kd * (nd + 2.78019) + 2.99587 * kd * (nd + 2.78019).sqrt() - 0.122119
                + 0.974598 / nd.sqrt()
                + 1.67997 / nd)
                .exp();
            assert!((p - 0.10).abs() < 0.015, "n={n}: p={p}");
        }
    }

    #[test]
    fn ks_distance_examples() {
        let sorted = [0.25, 0.75];
        assert!((ks_distance_sorted(&sorted, |x| x) - 0.25).abs() < 1e-15);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
    }
}
