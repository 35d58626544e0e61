// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive fusion of two branch distributions, with truncation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference value for the truncation cutoff `ln β + max(·)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffRule {
    /// Maximum of the fused scores.
    #[default]
    Fused,
    /// Maximum of the positive-branch log-probabilities.
    Positive,
}

/// Output of one fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    /// `(1+α)·pos − α·neg` for every token.
    pub raw: Vec<f64>,
    /// `raw` with tokens whose positive log-probability falls below the
    /// cutoff set to negative infinity.
    pub masked: Vec<f64>,
    pub cutoff: f64,
}

/// Fuses positive- and negative-branch log-probabilities.
pub fn fuse(pos: &[f64], neg: &[f64], alpha: f64, beta: f64, rule: CutoffRule) -> Result<Fused> {
    if pos.len() != neg.len() {
        return Err(Error::ShapeMismatch(format!(
            "branch vocabularies differ: {} vs {}",
            pos.len(),
            neg.len()
        )));
    }
    if pos.is_empty() {
        return Err(Error::EmptyInput("branch log-probabilities"));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("beta must lie in (0, 1], got {beta}")));
    }
    let raw: Vec<f64> = pos
        .iter()
        .zip(neg)
        .map(|(&p, &n)| (1.0 + alpha) * p - alpha * n)
        .collect();
    if raw.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("fused scores"));
    }
    let reference = match rule {
        CutoffRule::Fused => max(&raw),
        CutoffRule::Positive => max(pos),
    };
    let cutoff = beta.ln() + reference;
    let masked: Vec<f64> = raw
        .iter()
        .zip(pos)
        .map(|(&r, &p)| if p < cutoff { f64::NEG_INFINITY } else { r })
        .collect();
    if masked.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::EmptyAfterTruncation);
    }
    Ok(Fused { raw, masked, cutoff })
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let f = fuse(&[2.0, 0.0], &[1.0, 1.0], 1.0, 0.1, CutoffRule::Fused).unwrap();
        assert_eq!(f.raw, vec![3.0, -1.0]);
        assert!((f.cutoff - (0.1f64.ln() + 3.0)).abs() < 1e-12);
        assert!((f.cutoff - 0.697).abs() < 1e-3);
        assert_eq!(f.masked, vec![3.0, f64::NEG_INFINITY]);
    }

    #[test]
    fn positive_rule_uses_positive_maximum() {
        // raw max 3.0 would cut at 0.697; pos max 2.0 cuts at -0.303
        let f = fuse(&[2.0, 0.0], &[1.0, 1.0], 1.0, 0.1, CutoffRule::Positive).unwrap();
        assert_eq!(f.masked, vec![3.0, -1.0]);
    }

    #[test]
    fn zero_alpha_returns_positive_branch() {
        let pos = [-0.5, -1.2, -3.0];
        let f = fuse(&pos, &[-2.0, -0.1, -4.0], 0.0, 1e-9, CutoffRule::Fused).unwrap();
        assert_eq!(f.raw, pos.to_vec());
        assert_eq!(f.masked, pos.to_vec());
    }

    #[test]
    fn full_truncation_is_reported() {
        // raw = [2·(-3) - (-9), 2·(-0.1) - (-0.05)] = [3, -0.15]; cutoff = 3 + ln 0.5
        // masks token 0 (pos -3) and token 1 (pos -0.1 < 2.31)
        let err = fuse(&[-3.0, -0.1], &[-9.0, -0.05], 1.0, 0.5, CutoffRule::Fused).unwrap_err();
        assert!(matches!(err, Error::EmptyAfterTruncation));
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(fuse(&[0.0], &[0.0, 1.0], 1.0, 0.1, CutoffRule::Fused).is_err());
        assert!(fuse(&[0.0], &[0.0], -1.0, 0.1, CutoffRule::Fused).is_err());
        assert!(fuse(&[0.0], &[0.0], 1.0, 0.0, CutoffRule::Fused).is_err());
        assert!(fuse(&[0.0], &[0.0], 1.0, 1.5, CutoffRule::Fused).is_err());
    }

    proptest! {
        #[test]
        fn raw_is_linear_in_alpha(
            pairs in prop::collection::vec((-10.0f64..0.0, -10.0f64..0.0), 1..16),
            alpha in 0.0f64..4.0,
        ) {
            let (pos, neg): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let f = fuse(&pos, &neg, alpha, 1.0, CutoffRule::Positive).unwrap();
            for ((r, p), n) in f.raw.iter().zip(&pos).zip(&neg) {
                prop_assert!((r - (p + alpha * (p - n))).abs() <= 1e-9);
            }
        }
    }
}
