// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-wise normalization, selection and sampling primitives.
//!
//! Reductions run in `f64` and results are stored as `f32`; negative
//! infinity marks a masked logit and maps to zero probability.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Tolerance used for every "sums to one" check.
pub const NORM_TOL: f64 = 1e-6;

fn check_row(logits: &[f32]) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in logits {
        if x.is_nan() || x == f32::INFINITY {
            return Err(Error::NonFinite("logit row"));
        }
        max = max.max(x as f64);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    Ok(max)
}

/// Numerically stable softmax using max subtraction.
pub fn softmax_row(logits: &[f32]) -> Result<Vec<f32>> {
    let max = check_row(logits)?;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / sum) as f32).collect())
}

/// `logits - logsumexp(logits)`; masked entries stay at negative infinity.
pub fn log_softmax_row(logits: &[f32]) -> Result<Vec<f32>> {
    let max = check_row(logits)?;
    let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(logits.iter().map(|&x| (x as f64 - lse) as f32).collect())
}

/// Same as [`log_softmax_row`] but kept in `f64`, for accumulating scores.
pub fn log_softmax_row_f64(logits: &[f32]) -> Result<Vec<f64>> {
    let max = check_row(logits)?;
    let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(logits.iter().map(|&x| x as f64 - lse).collect())
}

/// Indices of the `k` largest values, sorted by descending value and then
/// ascending index.
pub fn top_k_indices<T: PartialOrd + Copy>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::OutOfRange {
            what: "top-k count",
            value: k,
            limit: values.len(),
        });
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Checks that `probs` is a probability vector within [`NORM_TOL`].
pub fn check_distribution(probs: &[f32]) -> Result<()> {
    let mut sum = 0.0f64;
    for (index, &p) in probs.iter().enumerate() {
        if p.is_nan() {
            return Err(Error::NonFinite("probability vector"));
        }
        if p < 0.0 {
            return Err(Error::NegativeProbability { index, value: p as f64 });
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > NORM_TOL {
        return Err(Error::NotNormalized(sum));
    }
    Ok(())
}

/// Inverse-CDF draw over `probs` in the order given. Zero-mass entries are
/// never returned.
pub fn sample_categorical(probs: &[f32], rng: &mut Rng) -> Result<usize> {
    check_distribution(probs)?;
    let u = rng.uniform();
    let mut cum = 0.0f64;
    let mut last_nonzero = None;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p as f64;
        last_nonzero = Some(i);
        if u < cum {
            return Ok(i);
        }
    }
    // u landed in the rounding slack above the final cumulative sum
    last_nonzero.ok_or(Error::EmptySupport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((*x as f64 - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_examples() {
        close(&softmax_row(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-7);
        close(&softmax_row(&[3.5, f32::NEG_INFINITY]).unwrap(), &[1.0, 0.0], 0.0);
        // direct exponentiation: e^0 / (e^0 + e^ln3) = 1/4
        let direct = [1.0 / (1.0 + 3.0), 3.0 / (1.0 + 3.0)];
        close(&softmax_row(&[1f32.ln(), 3f32.ln()]).unwrap(), &direct, 1e-7);
    }

    #[test]
    fn softmax_rejects_fully_masked_rows() {
        let err = softmax_row(&[f32::NEG_INFINITY; 3]).unwrap_err();
        assert_eq!(err.to_string(), "empty support");
        assert!(log_softmax_row(&[f32::NEG_INFINITY]).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let ln2 = std::f64::consts::LN_2;
        let ln3 = 3f64.ln();
        let ln4 = 4f64.ln();
        close(&log_softmax_row(&[0.0, 0.0]).unwrap(), &[-ln2, -ln2], 1e-7);
        close(&log_softmax_row(&[5.0, 5.0, 5.0]).unwrap(), &[-ln3, -ln3, -ln3], 1e-7);
        close(&log_softmax_row(&[0.0, 3f32.ln()]).unwrap(), &[-ln4, ln3 - ln4], 1e-6);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.2, 0.9, 0.9, 0.1], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[5.0], 1).unwrap(), vec![0]);
        // sort oracle: (value desc, index asc)
        let v = [3.0, 1.0, 4.0, 1.0, 5.0];
        let mut oracle: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = oracle.iter().take(3).map(|p| p.1).collect();
        assert_eq!(expected, vec![4, 2, 0]);
        assert_eq!(top_k_indices(&v, 3).unwrap(), expected);
        assert!(top_k_indices(&v, 0).is_err());
        assert!(top_k_indices(&v, 6).is_err());
    }

    #[test]
    fn top_k_places_infinity_first() {
        let v = [1.0, f64::INFINITY, 2.0, f64::INFINITY];
        assert_eq!(top_k_indices(&v, 3).unwrap(), vec![1, 3, 2]);
    }

    #[test]
    fn categorical_degenerate_cases() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[1.0], &mut rng).unwrap(), 0);
            assert_eq!(sample_categorical(&[0.0, 1.0], &mut rng).unwrap(), 1);
        }
        assert!(sample_categorical(&[0.5, 0.4], &mut rng).is_err());
        assert!(sample_categorical(&[1.5, -0.5], &mut rng).is_err());
    }

    #[test]
    fn categorical_frequency_matches_probability() {
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_categorical(&[0.25, 0.75], &mut rng).unwrap() == 0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.25).abs() <= 0.01, "freq {freq}");
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[f32::NEG_INFINITY, -1.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            row in prop::collection::vec(-20.0f32..20.0, 1..32),
            shift in -50.0f32..50.0,
        ) {
            let a = softmax_row(&row).unwrap();
            let shifted: Vec<f32> = row.iter().map(|x| x + shift).collect();
            let b = softmax_row(&shifted).unwrap();
            // x + shift rounds in f32 (half an ulp near 70 is ~4e-6), so the
            // two rows differ by up to that much per logit.
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
            let sum: f64 = a.iter().map(|&p| p as f64).sum();
            prop_assert!((sum - 1.0).abs() <= NORM_TOL);
        }

        #[test]
        fn exp_log_softmax_equals_softmax(row in prop::collection::vec(-20.0f32..20.0, 1..32)) {
            let p = softmax_row(&row).unwrap();
            let lp = log_softmax_row(&row).unwrap();
            for (x, y) in p.iter().zip(&lp) {
                prop_assert!((x - y.exp()).abs() <= 1e-6);
            }
        }

        #[test]
        fn full_top_k_is_a_permutation(row in prop::collection::vec(-5.0f32..5.0, 1..40)) {
            let mut idx = top_k_indices(&row, row.len()).unwrap();
            idx.sort_unstable();
            prop_assert_eq!(idx, (0..row.len()).collect::<Vec<_>>());
        }
    }
}
