// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention edits for steered decoding.
//!
//! Positive steering amplifies entries of selected heads (`a + α_pos·|a|`),
//! negative steering suppresses the entries of critical visual tokens in
//! every head (`a − α_neg·|a|`). Critical tokens are the visual positions
//! with the highest head-averaged attention weight at the current query.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, ModelConfig};
use crate::numerics::top_k_indices;

// ---------------------------------------------------------------------------
// Knobs
// ---------------------------------------------------------------------------

/// Set of `(layer, head)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct HeadSet(BTreeSet<(usize, usize)>);

impl HeadSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set, rejecting duplicate pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for p in pairs {
            if !set.insert(p) {
                return Err(Error::InvalidConfig(format!("duplicate head ({}, {})", p.0, p.1)));
            }
        }
        Ok(Self(set))
    }

    /// Every head of an `n_layers × n_heads` model.
    pub fn all(n_layers: usize, n_heads: usize) -> Self {
        Self((0..n_layers).flat_map(|l| (0..n_heads).map(move |h| (l, h))).collect())
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.0.contains(&(layer, head))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().copied()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (l, h) in self.iter() {
            if l >= config.n_layers {
                return Err(Error::OutOfRange {
                    what: "head-set layer",
                    value: l,
                    limit: config.n_layers,
                });
            }
            if h >= config.n_heads {
                return Err(Error::OutOfRange {
                    what: "head-set head",
                    value: h,
                    limit: config.n_heads,
                });
            }
        }
        Ok(())
    }

    /// Jaccard overlap `|A ∩ B| / |A ∪ B|`; two empty sets overlap fully.
    pub fn jaccard(&self, other: &HeadSet) -> f64 {
        let inter = self.0.intersection(&other.0).count();
        let union = self.0.union(&other.0).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl TryFrom<Vec<(usize, usize)>> for HeadSet {
    type Error = Error;
    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        Self::from_pairs(v)
    }
}

impl From<HeadSet> for Vec<(usize, usize)> {
    fn from(s: HeadSet) -> Self {
        s.0.into_iter().collect()
    }
}

/// Size of the critical visual-token set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaVis {
    /// Fraction of the visual tokens, in `(0, 1]`.
    Fraction(f32),
    /// Absolute count, at least 1.
    Count(usize),
}

impl KappaVis {
    /// Resolves to a count for `n_visual` tokens: a fraction becomes
    /// `max(1, round(fraction · n_visual))`.
    pub fn resolve(self, n_visual: usize) -> Result<usize> {
        let count = match self {
            KappaVis::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidConfig(format!("kappa_vis fraction {f} outside (0, 1]")));
                }
                ((f as f64 * n_visual as f64).round() as usize).max(1)
            }
            KappaVis::Count(c) => c,
        };
        if count == 0 || count > n_visual {
            return Err(Error::OutOfRange {
                what: "critical visual-token count",
                value: count,
                limit: n_visual,
            });
        }
        Ok(count)
    }
}

/// Which columns positive steering touches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosScope {
    #[default]
    VisualColumns,
    WholeRow,
}

/// Layer whose attention ranks the critical visual tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritSource {
    /// Each layer ranks tokens by its own attention.
    #[default]
    PerLayer,
    /// An unsteered probe pass ranks tokens by the last layer's attention
    /// and the result is applied in every layer.
    FinalLayer,
}

/// Whether edits act on raw scores or on normalized weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditStage {
    /// Edit raw scores, then softmax.
    #[default]
    PreSoftmax,
    /// Softmax, edit weights (clamped at zero), then renormalize the row.
    PostSoftmaxRenorm,
}

/// All knobs of attention-steered contrastive decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringSpec {
    pub heads_pos: HeadSet,
    pub alpha_pos: f32,
    pub alpha_neg: f32,
    pub kappa_vis: KappaVis,
    /// Contrast weight α of the fusion `(1+α)·pos − α·neg`.
    pub alpha: f32,
    /// Truncation threshold β in `(0, 1]`.
    pub beta: f32,
    pub pos_scope: PosScope,
    pub crit_source: CritSource,
    pub edit_stage: EditStage,
    /// Also steer prompt positions during prefill (off by default).
    pub steer_prefill: bool,
}

impl Default for SteeringSpec {
    fn default() -> Self {
        Self {
            heads_pos: HeadSet::new(),
            alpha_pos: 0.6,
            alpha_neg: 1.0,
            kappa_vis: KappaVis::Fraction(0.1),
            alpha: 1.0,
            beta: 0.1,
            pos_scope: PosScope::VisualColumns,
            crit_source: CritSource::PerLayer,
            edit_stage: EditStage::PreSoftmax,
            steer_prefill: false,
        }
    }
}

impl SteeringSpec {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (name, v) in [
            ("alpha_pos", self.alpha_pos),
            ("alpha_neg", self.alpha_neg),
            ("alpha", self.alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        match self.kappa_vis {
            KappaVis::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::InvalidConfig(format!("kappa_vis fraction {f}")));
            }
            KappaVis::Count(0) => {
                return Err(Error::InvalidConfig("kappa_vis count must be >= 1".into()));
            }
            _ => {}
        }
        self.heads_pos.validate(config)
    }

    /// Directive for the positively steered branch.
    pub fn positive_directive(&self) -> SteeringDirective {
        SteeringDirective {
            positive: Some(PositiveEdit {
                heads: self.heads_pos.clone(),
                alpha_pos: self.alpha_pos,
                scope: self.pos_scope,
            }),
            negative: None,
            stage: self.edit_stage,
        }
    }

    /// Directive for the negatively steered branch.
    pub fn negative_directive(&self) -> SteeringDirective {
        SteeringDirective {
            positive: None,
            negative: Some(NegativeEdit {
                rule: CriticalRule::TopScore {
                    kappa: self.kappa_vis,
                    source: self.crit_source,
                },
                alpha_neg: self.alpha_neg,
            }),
            stage: self.edit_stage,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-step directives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveEdit {
    pub heads: HeadSet,
    pub alpha_pos: f32,
    pub scope: PosScope,
}

/// How the negatively steered visual tokens are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalRule {
    TopScore {
        kappa: KappaVis,
        source: CritSource,
    },
    /// Fixed visual-token indices (used by random-token controls).
    Fixed(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeEdit {
    pub rule: CriticalRule,
    pub alpha_neg: f32,
}

/// Attention edits applied to one decoding step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SteeringDirective {
    pub positive: Option<PositiveEdit>,
    pub negative: Option<NegativeEdit>,
    pub stage: EditStage,
}

impl SteeringDirective {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let Some(p) = &self.positive {
            if !(p.alpha_pos.is_finite() && p.alpha_pos >= 0.0) {
                return Err(Error::InvalidConfig("alpha_pos must be >= 0".into()));
            }
            p.heads.validate(config)?;
        }
        if let Some(n) = &self.negative {
            if !(n.alpha_neg.is_finite() && n.alpha_neg >= 0.0) {
                return Err(Error::InvalidConfig("alpha_neg must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Critical visual tokens chosen in one layer, with their scores `s(v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalTokenSet {
    pub layer: usize,
    pub tokens: Vec<usize>,
    pub scores: Vec<f32>,
}

// ---------------------------------------------------------------------------
// Edits
// ---------------------------------------------------------------------------

/// `a + α_pos·|a|` on the visual columns (or the whole row).
pub fn positive_edit(row: &[f32], visual_positions: &[usize], alpha_pos: f32, scope: PosScope) -> Vec<f32> {
    let mut out = row.to_vec();
    positive_edit_in_place(&mut out, visual_positions, alpha_pos, scope);
    out
}

pub(crate) fn positive_edit_in_place(row: &mut [f32], visual_positions: &[usize], alpha_pos: f32, scope: PosScope) {
    match scope {
        PosScope::WholeRow => {
            for a in row.iter_mut() {
                *a += alpha_pos * a.abs();
            }
        }
        PosScope::VisualColumns => {
            for &p in visual_positions {
                if let Some(a) = row.get_mut(p) {
                    *a += alpha_pos * a.abs();
                }
            }
        }
    }
}

/// `a − α_neg·|a|` at each critical position.
pub fn negative_edit(row: &[f32], critical_positions: &[usize], alpha_neg: f32) -> Result<Vec<f32>> {
    let mut out = row.to_vec();
    negative_edit_in_place(&mut out, critical_positions, alpha_neg)?;
    Ok(out)
}

pub(crate) fn negative_edit_in_place(row: &mut [f32], critical_positions: &[usize], alpha_neg: f32) -> Result<()> {
    for &p in critical_positions {
        let len = row.len();
        let a = row.get_mut(p).ok_or(Error::OutOfRange {
            what: "critical position",
            value: p,
            limit: len,
        })?;
        *a -= alpha_neg * a.abs();
    }
    Ok(())
}

/// Mean over heads of the normalized weight at each visual position.
pub fn head_mean_visual(rows: &[&[f32]], visual_positions: &[usize]) -> Vec<f32> {
    let n = rows.len() as f64;
    visual_positions
        .iter()
        .map(|&p| {
            let sum: f64 = rows.iter().map(|r| r.get(p).copied().unwrap_or(0.0) as f64).sum();
            (sum / n) as f32
        })
        .collect()
}

/// Critical-token score `s(v)`: head-averaged post-softmax weight of each
/// visual token, from the records of one layer at one query position.
pub fn critical_token_score(
    records: &[AttentionRecord],
    n_heads: usize,
    visual_positions: &[usize],
) -> Result<Vec<f32>> {
    let first = records.first().ok_or(Error::EmptyInput("attention records"))?;
    let mut rows: Vec<Option<&[f32]>> = vec![None; n_heads];
    for r in records {
        if r.layer != first.layer || r.query_position != first.query_position {
            return Err(Error::ShapeMismatch(
                "records span several layers or query positions".into(),
            ));
        }
        let slot = rows.get_mut(r.head).ok_or(Error::OutOfRange {
            what: "record head",
            value: r.head,
            limit: n_heads,
        })?;
        *slot = Some(&r.post_norm_weights);
    }
    let rows: Vec<&[f32]> = rows
        .into_iter()
        .enumerate()
        .map(|(h, r)| r.ok_or_else(|| Error::ShapeMismatch(format!("missing head {h}"))))
        .collect::<Result<_>>()?;
    Ok(head_mean_visual(&rows, visual_positions))
}

/// Top-κ visual tokens of `scores`, ties to the lowest index.
pub fn select_critical(scores: &[f32], kappa: KappaVis) -> Result<Vec<usize>> {
    let count = kappa.resolve(scores.len())?;
    top_k_indices(scores, count)
}

/// [`select_critical`] with κ resolved against the full image of
/// `n_visual` tokens and capped at the tokens visible so far, which can be
/// fewer while a steered prefill is still inside the image.
pub fn select_critical_visible(scores: &[f32], kappa: KappaVis, n_visual: usize) -> Result<Vec<usize>> {
    let count = kappa.resolve(n_visual)?.min(scores.len());
    top_k_indices(scores, count)
}
