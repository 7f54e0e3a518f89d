//! Bounded real-valued streams and exact reference sums.

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Error, Result};

/// Double-double accumulator built from error-free transformations.
///
/// While the running sum is representable in ~106 bits the pair `(hi, lo)`
/// holds it exactly and `hi` is the correctly rounded value, so two
/// accumulators fed the same multiset of values in different groupings
/// agree bit for bit.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExactSum {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl ExactSum {
    pub const ZERO: ExactSum = ExactSum { hi: 0.0, lo: 0.0 };

    pub fn from_value(x: f64) -> Self {
        ExactSum { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = fast_two_sum(s, e + self.lo);
        self.hi = hi;
        self.lo = lo;
    }

    #[inline]
    pub fn merge(&mut self, other: &ExactSum) {
        let (s, e) = two_sum(self.hi, other.hi);
        let (t, f) = two_sum(self.lo, other.lo);
        let (s, e) = fast_two_sum(s, e + t);
        let (hi, lo) = fast_two_sum(s, e + f);
        self.hi = hi;
        self.lo = lo;
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

impl std::iter::FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = ExactSum::ZERO;
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// A finite stream of observations in `[0, bound]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    values: Vec<f64>,
    bound: f64,
}

impl Stream {
    /// Values outside `[0, bound]` (or NaN) are rejected, never clamped.
    pub fn new(values: Vec<f64>, bound: f64) -> Result<Self> {
        check_positive("bound", bound)?;
        if values.is_empty() {
            return Err(Error::InsufficientData("stream is empty".into()));
        }
        if let Some(&value) = values.iter().find(|v| !(**v >= 0.0 && **v <= bound)) {
            return Err(Error::ValueOutOfRange { value, bound });
        }
        Ok(Stream { values, bound })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Exact (compensated) sum of the first `i` observations, 1-based.
pub fn true_prefix_sum(stream: &Stream, i: usize) -> Result<f64> {
    if i == 0 || i > stream.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: stream.len(),
        });
    }
    Ok(stream.values[..i].iter().copied().collect::<ExactSum>().value())
}

/// Number of positions at which two equal-length streams differ.
/// Streams are adjacent exactly when this is 1.
pub fn hamming_distance(a: &Stream, b: &Stream) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.values.iter().zip(&b.values).filter(|(x, y)| x != y).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(values: &[f64], bound: f64) -> Stream {
        Stream::new(values.to_vec(), bound).unwrap()
    }

    #[test]
    fn prefix_sums() {
        assert_eq!(true_prefix_sum(&s(&[0.0, 0.0, 0.0], 1.0), 3).unwrap(), 0.0);
        let ramp: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(true_prefix_sum(&s(&ramp, 8.0), 7).unwrap(), 28.0);
    }

    #[test]
    fn prefix_sum_of_a_million_maxima() {
        let stream = s(&vec![10_000.0; 1_000_000], 10_000.0);
        assert_eq!(true_prefix_sum(&stream, 1_000_000).unwrap(), 1e10);
    }

    #[test]
    fn prefix_sum_index_errors() {
        let stream = s(&[1.0, 2.0], 2.0);
        assert!(matches!(
            true_prefix_sum(&stream, 0),
            Err(Error::IndexOutOfRange { index: 0, len: 2 })
        ));
        assert!(true_prefix_sum(&stream, 3).is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(matches!(
            Stream::new(vec![1.0, 5.5], 5.0),
            Err(Error::ValueOutOfRange { value, .. }) if value == 5.5
        ));
        assert!(Stream::new(vec![-0.1], 5.0).is_err());
        assert!(Stream::new(vec![f64::NAN], 5.0).is_err());
        assert!(Stream::new(vec![], 5.0).is_err());
    }

    #[test]
    fn hamming_examples() {
        let b = 10.0;
        assert_eq!(hamming_distance(&s(&[1., 2., 3.], b), &s(&[1., 2., 3.], b)).unwrap(), 0);
        assert_eq!(hamming_distance(&s(&[1., 2., 3.], b), &s(&[1., 9., 3.], b)).unwrap(), 1);
        assert_eq!(hamming_distance(&s(&[0., 0.], b), &s(&[b, b], b)).unwrap(), 2);
        assert!(hamming_distance(&s(&[0.], b), &s(&[0., 1.], b)).is_err());
    }

    #[test]
    fn exact_sum_survives_cancellation() {
        let acc: ExactSum = [1e16, 1.0, -1e16, 1.0].into_iter().collect();
        assert_eq!(acc.value(), 2.0);
    }

    proptest! {
        #[test]
        fn prefix_sum_is_monotone(values in prop::collection::vec(0.0f64..100.0, 1..200)) {
            let stream = s(&values, 100.0);
            let mut prev = 0.0;
            for i in 1..=stream.len() {
                let cur = true_prefix_sum(&stream, i).unwrap();
                prop_assert!(cur >= prev);
                prev = cur;
            }
        }

        #[test]
        fn hamming_is_a_metric(
            triple in (1usize..12).prop_flat_map(|n| (
                prop::collection::vec(0u8..3, n),
                prop::collection::vec(0u8..3, n),
                prop::collection::vec(0u8..3, n),
            ))
        ) {
            let to = |v: &Vec<u8>| s(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>(), 2.0);
            let (a, b, c) = (to(&triple.0), to(&triple.1), to(&triple.2));
            let ab = hamming_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, hamming_distance(&b, &a).unwrap());
            prop_assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
            prop_assert_eq!(ab == 0, triple.0 == triple.1);
            let bc = hamming_distance(&b, &c).unwrap();
            prop_assert!(hamming_distance(&a, &c).unwrap() <= ab + bc);
        }

        #[test]
        fn exact_sum_is_grouping_invariant(values in prop::collection::vec(0.0f64..1e3, 1..300), split in 0usize..300) {
            let split = split.min(values.len());
            let whole: ExactSum = values.iter().copied().collect();
            let mut left: ExactSum = values[..split].iter().copied().collect();
            let right: ExactSum = values[split..].iter().copied().collect();
            left.merge(&right);
            prop_assert_eq!(whole.value().to_bits(), left.value().to_bits());
        }
    }
}
