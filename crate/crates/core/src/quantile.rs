//! Empirical upper-tail quantiles of a buffered prefix and their smooth
//! sensitivity.
//!
//! Quantile levels follow the upper-tail convention: level `q` names the
//! point with roughly a `q` fraction of the data above it, so smaller `q`
//! reaches further into the tail.

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, check_unit_open, Error, Result};

/// The first `m` observations in ascending order, padded with `0` in front
/// and `bound` at the back (positions `0..=m+1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SortedPrefix {
    padded: Vec<f64>,
    bound: f64,
}

impl SortedPrefix {
    pub fn new(values: &[f64], bound: f64) -> Result<Self> {
        check_positive("bound", bound)?;
        if values.is_empty() {
            return Err(Error::InsufficientData("prefix is empty".into()));
        }
        if let Some(&value) = values.iter().find(|v| !(**v >= 0.0 && **v <= bound)) {
            return Err(Error::ValueOutOfRange { value, bound });
        }
        let mut padded = Vec::with_capacity(values.len() + 2);
        padded.push(0.0);
        padded.extend_from_slice(values);
        padded.push(bound);
        padded[1..=values.len()].sort_unstable_by(f64::total_cmp);
        Ok(SortedPrefix { padded, bound })
    }

    /// Number of buffered observations (excluding the two sentinels).
    pub fn m(&self) -> usize {
        self.padded.len() - 2
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn padded(&self) -> &[f64] {
        &self.padded
    }

    /// Value at a padded position, with indices clamped to `[0, m+1]`.
    #[inline]
    pub fn at_clamped(&self, pos: isize) -> f64 {
        let last = self.padded.len() as isize - 1;
        self.padded[pos.clamp(0, last) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileResult {
    pub q: f64,
    /// Position in the padded array.
    pub rank: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothQuantile {
    pub quantile: QuantileResult,
    pub smooth_sensitivity: f64,
    pub smoothing_b: f64,
}

/// `ceil((1 - q) m) + 1`, the padded position of the level-`q` quantile.
///
/// Values of `(1 - q) m` within float noise of an integer are snapped to it.
pub fn quantile_rank(m: usize, q: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::param("q", q, "must lie in [0, 1)"));
    }
    let below = (1.0 - q) * m as f64;
    let nearest = below.round();
    let below = if (below - nearest).abs() <= 1e-9 * below.max(1.0) {
        nearest
    } else {
        below.ceil()
    };
    Ok(below as usize + 1)
}

/// The level-`q` empirical quantile; `q` must satisfy `1/m < q < 1`.
pub fn empirical_quantile(prefix: &SortedPrefix, q: f64) -> Result<QuantileResult> {
    let m = prefix.m();
    if !(q > 1.0 / m as f64 && q < 1.0) {
        return Err(Error::param("q", q, "must lie in (1/m, 1)"));
    }
    let rank = quantile_rank(m, q)?;
    Ok(QuantileResult {
        q,
        rank,
        value: prefix.padded[rank],
    })
}

/// Largest change of the rank-`rank` order statistic over streams at
/// distance at most `k`: `max_{t=0..=k+1} |x[P+t] - x[P+t-k-1]|`, clamped.
pub fn local_sensitivity_at_k(prefix: &SortedPrefix, rank: usize, k: usize) -> f64 {
    let p = rank as isize;
    let k = k as isize;
    (0..=k + 1)
        .map(|t| (prefix.at_clamped(p + t) - prefix.at_clamped(p + t - k - 1)).abs())
        .fold(0.0, f64::max)
}

/// `max_k e^{-bk} * local_sensitivity_at_k`, stopping once `e^{-bk} * bound`
/// can no longer beat the running maximum.
pub fn smooth_sensitivity(prefix: &SortedPrefix, rank: usize, b: f64) -> Result<f64> {
    check_positive("b", b)?;
    let m = prefix.m();
    let mut best: f64 = 0.0;
    for k in 0..=m + 1 {
        let decay = (-b * k as f64).exp();
        if decay * prefix.bound <= best {
            break;
        }
        best = best.max(decay * local_sensitivity_at_k(prefix, rank, k));
    }
    Ok(best)
}

pub fn smooth_quantile(prefix: &SortedPrefix, q: f64, b: f64) -> Result<SmoothQuantile> {
    let quantile = empirical_quantile(prefix, q)?;
    Ok(SmoothQuantile {
        quantile,
        smooth_sensitivity: smooth_sensitivity(prefix, quantile.rank, b)?,
        smoothing_b: b,
    })
}

/// Level-`q` quantile of an ascending slice with no sentinels, using the
/// same rank convention; returns the maximum when the rank runs past the end.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InsufficientData("no observations".into()));
    }
    let rank = quantile_rank(sorted.len(), q)?;
    Ok(sorted[(rank - 1).min(sorted.len() - 1)])
}

/// Log-probabilities of `Binomial(m, p)` at `0..=k`, built by the ratio
/// recurrence from `ln (1-p)^m`.
fn binomial_log_pmf_prefix(m: u64, p: f64, k: u64) -> impl Iterator<Item = f64> {
    let log_odds = p.ln() - (-p).ln_1p();
    let start = m as f64 * (-p).ln_1p();
    (0..=k.min(m)).scan(start, move |log_term, i| {
        let current = *log_term;
        *log_term += ((m - i) as f64).ln() - ((i + 1) as f64).ln() + log_odds;
        Some(current)
    })
}

/// `P[Binomial(m, p) <= k]`, summed smallest term first for `k` below the mode.
pub fn binomial_cdf(m: u64, p: f64, k: u64) -> f64 {
    let logs: Vec<f64> = binomial_log_pmf_prefix(m, p, k).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return 0.0;
    }
    let scaled: f64 = logs.iter().map(|l| (l - top).exp()).sum();
    (top.exp() * scaled).min(1.0)
}

/// Probability that the level-`lambda * p` empirical quantile of `m` draws
/// falls below the true level-`p` quantile: `P[Binomial(m, p) <= floor(lambda p m)]`.
pub fn g_underestimate_prob(lambda: f64, p: f64, m: u64) -> Result<f64> {
    check_unit_open("p", p)?;
    if m == 0 {
        return Err(Error::param("m", 0.0, "must be positive"));
    }
    let threshold = 1.0 / (p * m as f64);
    if !(lambda > threshold && lambda <= 1.0) {
        return Err(Error::param("lambda", lambda, "must lie in (1/(p m), 1]"));
    }
    let expected = lambda * p * m as f64;
    let k = (expected + 1e-9 * expected.max(1.0)).floor() as u64;
    Ok(binomial_cdf(m, p, k))
}

/// Largest count `k <= floor(p m)` with `P[Binomial(m, p) <= k] <= beta`, if any.
pub fn max_count_within(m: u64, p: f64, beta: f64) -> Option<u64> {
    let cap = (p * m as f64).floor() as u64;
    let mut total: f64 = 0.0;
    let mut best = None;
    for (k, log_pmf) in binomial_log_pmf_prefix(m, p, cap).enumerate() {
        total += log_pmf.exp();
        if total > beta {
            break;
        }
        best = Some(k as u64);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(m: usize) -> SortedPrefix {
        let vals: Vec<f64> = (1..=m).rev().map(|v| v as f64).collect();
        SortedPrefix::new(&vals, m as f64 + 1.0).unwrap()
    }

    /// Smallest element with at least `(1-q) m` strictly smaller elements.
    fn definitional_quantile(values: &[f64], q: f64) -> f64 {
        let need = (1.0 - q) * values.len() as f64;
        values
            .iter()
            .copied()
            .filter(|&x| values.iter().filter(|&&y| y < x).count() as f64 >= need - 1e-9)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn padding_and_sorting() {
        let p = SortedPrefix::new(&[3.0, 1.0, 2.0], 5.0).unwrap();
        assert_eq!(p.padded(), &[0.0, 1.0, 2.0, 3.0, 5.0]);
        assert_eq!(p.m(), 3);
        assert!(SortedPrefix::new(&[6.0], 5.0).is_err());
        assert!(SortedPrefix::new(&[], 5.0).is_err());
    }

    #[test]
    fn empirical_quantile_examples() {
        let prefix = ramp(100);
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let mid = empirical_quantile(&prefix, 0.5).unwrap();
        assert_eq!((mid.rank, mid.value), (51, 51.0));
        assert_eq!(definitional_quantile(&values, 0.5), 51.0);
        let low = empirical_quantile(&prefix, 0.99).unwrap();
        assert_eq!((low.rank, low.value), (2, 2.0));
        assert_eq!(definitional_quantile(&values, 0.99), 2.0);
        assert_eq!(quantile_rank(100, 0.0).unwrap(), 101);
        assert_eq!(prefix.padded()[101], prefix.bound());
        assert!(empirical_quantile(&prefix, 0.01).is_err());
        assert!(empirical_quantile(&prefix, 1.0).is_err());
    }

    #[test]
    fn local_sensitivity_examples() {
        let flat = SortedPrefix::new(&[4.0; 6], 4.0).unwrap();
        // interior windows on a constant prefix have zero gaps
        assert_eq!(local_sensitivity_at_k(&flat, 3, 0), 0.0);
        assert_eq!(local_sensitivity_at_k(&flat, 3, 1), 0.0);

        let prefix = SortedPrefix::new(&[10.0, 20.0, 30.0], 100.0).unwrap();
        assert_eq!(local_sensitivity_at_k(&prefix, 2, 0), 10.0);
        assert_eq!(local_sensitivity_at_k(&prefix, 2, 4), 100.0);
    }

    #[test]
    fn smooth_sensitivity_matches_direct_max() {
        let prefix = SortedPrefix::new(&[2.0, 2.0, 2.0, 2.0], 10.0).unwrap();
        let b = 1.0;
        let direct = (0..=5)
            .map(|k| (-b * k as f64).exp() * local_sensitivity_at_k(&prefix, 3, k))
            .fold(0.0, f64::max);
        assert_eq!(smooth_sensitivity(&prefix, 3, b).unwrap(), direct);
        assert!(smooth_sensitivity(&prefix, 3, 0.0).is_err());
    }

    #[test]
    fn large_b_reduces_to_local_sensitivity() {
        let prefix = SortedPrefix::new(&[1.0, 4.0, 9.0, 16.0, 25.0], 30.0).unwrap();
        let ss = smooth_sensitivity(&prefix, 3, 200.0).unwrap();
        assert_eq!(ss, local_sensitivity_at_k(&prefix, 3, 0));
    }

    #[test]
    fn g_examples() {
        // A zero count limit leaves the single term (1-p)^m. The lambda > 1/(pm)
        // domain keeps g itself from ever reaching it, so check the sum directly.
        let (p, m) = (0.01, 150u64);
        assert!((binomial_cdf(m, p, 0) - (1.0 - p).powi(150)).abs() < 1e-15);
        let g = g_underestimate_prob(0.9, p, m).unwrap();
        let two_terms = (1.0 - p).powi(150) + 150.0 * p * (1.0 - p).powi(149);
        assert!((g - two_terms).abs() < 1e-14);
        assert!(g_underestimate_prob(0.5, 0.005, 20_000).unwrap() < 0.02);
        assert!(g_underestimate_prob(0.5, 0.005, 100).is_err());
        assert!(g_underestimate_prob(1.5, 0.005, 100_000).is_err());
    }

    /// Binomial CDF by direct summation with multiplicative coefficients.
    fn naive_cdf(m: u64, p: f64, k: u64) -> f64 {
        let mut total = 0.0;
        let mut coeff = 1.0f64;
        for i in 0..=k {
            if i > 0 {
                coeff *= (m - i + 1) as f64 / i as f64;
            }
            total += coeff * p.powi(i as i32) * (1.0 - p).powi((m - i) as i32);
        }
        total
    }

    #[test]
    fn g_matches_direct_summation() {
        for m in [10u64, 57, 200, 640, 1000] {
            for p in [0.01, 0.05, 0.2, 0.5] {
                for lambda in [0.3, 0.75, 1.0] {
                    let Ok(g) = g_underestimate_prob(lambda, p, m) else {
                        continue;
                    };
                    let k = (lambda * p * m as f64 + 1e-9).floor() as u64;
                    let oracle = naive_cdf(m, p, k);
                    assert!(
                        (g - oracle).abs() <= 1e-12 * oracle,
                        "m={m} p={p} l={lambda}: {g} vs {oracle}"
                    );
                }
            }
        }
    }

    #[test]
    fn max_count_within_is_tight() {
        let (m, p, beta) = (50_000u64, 0.005, 0.004);
        let k = max_count_within(m, p, beta).unwrap();
        assert!(binomial_cdf(m, p, k) <= beta);
        assert!(binomial_cdf(m, p, k + 1) > beta);
        assert_eq!(max_count_within(100, 0.005, 0.1), None);
    }

    proptest! {
        #[test]
        fn quantile_is_monotone_in_level(values in prop::collection::vec(0.0f64..10.0, 5..60)) {
            let prefix = SortedPrefix::new(&values, 10.0).unwrap();
            let m = values.len() as f64;
            let levels: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).filter(|&q| q > 1.0 / m).collect();
            for pair in levels.windows(2) {
                let hi = empirical_quantile(&prefix, pair[0]).unwrap().value;
                let lo = empirical_quantile(&prefix, pair[1]).unwrap().value;
                prop_assert!(hi >= lo);
            }
        }

        #[test]
        fn smooth_sensitivity_dominates_local(values in prop::collection::vec(0.0f64..10.0, 2..40), b in 0.01f64..2.0, q in 0.1f64..0.9) {
            let prefix = SortedPrefix::new(&values, 10.0).unwrap();
            prop_assume!(q > 1.0 / values.len() as f64);
            let r = empirical_quantile(&prefix, q).unwrap().rank;
            let ss = smooth_sensitivity(&prefix, r, b).unwrap();
            prop_assert!(ss >= local_sensitivity_at_k(&prefix, r, 0));
            prop_assert!(ss >= (-b).exp() * local_sensitivity_at_k(&prefix, r, 1));
        }

        #[test]
        fn smooth_sensitivity_is_b_smooth(
            values in prop::collection::vec(0.0f64..10.0, 2..30),
            pos_frac in 0.0f64..1.0,
            replacement in 0.0f64..10.0,
            b in 0.01f64..1.0,
        ) {
            let m = values.len();
            let q = 0.5f64.max(1.5 / m as f64).min(0.99);
            let mut neighbor = values.clone();
            neighbor[((m - 1) as f64 * pos_frac) as usize] = replacement;
            let ss = |v: &[f64]| {
                let prefix = SortedPrefix::new(v, 10.0).unwrap();
                let r = empirical_quantile(&prefix, q).unwrap().rank;
                smooth_sensitivity(&prefix, r, b).unwrap()
            };
            let (a, c) = (ss(&values), ss(&neighbor));
            prop_assert!(a <= b.exp() * c * (1.0 + 1e-12));
            prop_assert!(c <= b.exp() * a * (1.0 + 1e-12));
        }
    }
}
