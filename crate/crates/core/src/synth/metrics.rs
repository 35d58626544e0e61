// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-sample evaluation records and the CHAIR / POPE scores computed from
//! them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::probes::ProbeKind;
use super::vocab::{Vocab, YES};
use super::world::World;
use crate::error::{Error, Result};

/// Probe kinds plus the captioning task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Random,
    Popular,
    Adversarial,
    Caption,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Random,
        TaskKind::Popular,
        TaskKind::Adversarial,
        TaskKind::Caption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Random => "random",
            TaskKind::Popular => "popular",
            TaskKind::Adversarial => "adversarial",
            TaskKind::Caption => "caption",
        }
    }

    pub fn probe(self) -> Option<ProbeKind> {
        match self {
            TaskKind::Random => Some(ProbeKind::Random),
            TaskKind::Popular => Some(ProbeKind::Popular),
            TaskKind::Adversarial => Some(ProbeKind::Adversarial),
            TaskKind::Caption => None,
        }
    }
}

impl From<ProbeKind> for TaskKind {
    fn from(k: ProbeKind) -> Self {
        match k {
            ProbeKind::Random => TaskKind::Random,
            ProbeKind::Popular => TaskKind::Popular,
            ProbeKind::Adversarial => TaskKind::Adversarial,
        }
    }
}

/// One generated answer or caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene: usize,
    pub method: String,
    pub strategy: String,
    pub kind: TaskKind,
    /// Queried class for probes.
    pub class: Option<usize>,
    /// Ground truth for probes.
    pub expected: Option<bool>,
    #[serde(default)]
    pub planted: bool,
    pub tokens: Vec<u32>,
    pub text: String,
    /// Distinct classes named in a caption, in order of first mention.
    pub mentioned: Vec<usize>,
    pub hallucinated: Vec<usize>,
    /// Probe answer: the first token is "yes". Anything else reads as "no".
    pub answer: Option<bool>,
    pub correct: Option<bool>,
    /// Mean per-step `|pos - neg|` divergence for contrastive methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<f64>,
    /// Decoding failure; the record then holds an empty output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// First token is "yes".
pub fn parse_answer(tokens: &[u32]) -> bool {
    tokens.first() == Some(&YES)
}

/// Distinct class mentions in order, by exact token match.
pub fn extract_mentions(tokens: &[u32], vocab: &Vocab) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    tokens
        .iter()
        .filter_map(|&t| vocab.class_of(t))
        .filter(|k| seen.insert(*k))
        .collect()
}

impl EvalRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn probe(
        world: &World,
        scene: usize,
        kind: ProbeKind,
        class: usize,
        expected: bool,
        planted: bool,
        method: &str,
        strategy: &str,
        tokens: Vec<u32>,
        error: Option<String>,
    ) -> Self {
        let answer = parse_answer(&tokens);
        Self {
            scene,
            method: method.to_string(),
            strategy: strategy.to_string(),
            kind: kind.into(),
            class: Some(class),
            expected: Some(expected),
            planted,
            text: world.vocab().render(&tokens, &world.ontology),
            tokens,
            mentioned: Vec::new(),
            hallucinated: Vec::new(),
            answer: Some(answer),
            correct: Some(answer == expected),
            divergence: None,
            error,
        }
    }

    pub fn caption(
        world: &World,
        scene: usize,
        method: &str,
        strategy: &str,
        tokens: Vec<u32>,
        error: Option<String>,
    ) -> Self {
        let vocab = world.vocab();
        let mentioned = extract_mentions(&tokens, &vocab);
        let hallucinated = mentioned
            .iter()
            .copied()
            .filter(|k| !world.scenes[scene].contains(*k))
            .collect();
        Self {
            scene,
            method: method.to_string(),
            strategy: strategy.to_string(),
            kind: TaskKind::Caption,
            class: None,
            expected: None,
            planted: false,
            text: vocab.render(&tokens, &world.ontology),
            tokens,
            mentioned,
            hallucinated,
            answer: None,
            correct: None,
            divergence: None,
            error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    /// `None` when no caption mentions any object.
    pub chair_i: Option<f64>,
    pub n_captions: usize,
    pub n_mentions: usize,
    pub n_hallucinated: usize,
}

/// Sentence- and instance-level hallucination rates over caption records.
pub fn chair_scores(records: &[EvalRecord]) -> Result<ChairScores> {
    let caps: Vec<&EvalRecord> = records.iter().filter(|r| r.kind == TaskKind::Caption).collect();
    if caps.is_empty() {
        return Err(Error::EmptyInput("caption records"));
    }
    let mut n_mentions = 0;
    let mut n_hallucinated = 0;
    let mut bad_captions = 0;
    for r in &caps {
        if r.hallucinated.iter().any(|h| !r.mentioned.contains(h)) {
            return Err(Error::Format(format!(
                "scene {}: hallucinated classes must be mentioned",
                r.scene
            )));
        }
        n_mentions += r.mentioned.len();
        n_hallucinated += r.hallucinated.len();
        if !r.hallucinated.is_empty() {
            bad_captions += 1;
        }
    }
    Ok(ChairScores {
        chair_s: bad_captions as f64 / caps.len() as f64,
        chair_i: (n_mentions > 0).then(|| n_hallucinated as f64 / n_mentions as f64),
        n_captions: caps.len(),
        n_mentions,
        n_hallucinated,
    })
}

/// Binary metrics with "yes" as the positive class. Undefined precision or
/// F1 read as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl BinaryMetrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub per_kind: BTreeMap<ProbeKind, BinaryMetrics>,
    /// Unweighted average of the per-kind metrics. Counts are summed.
    pub mean: BinaryMetrics,
}

pub fn pope_scores(records: &[EvalRecord]) -> Result<PopeScores> {
    let mut counts: BTreeMap<ProbeKind, [usize; 4]> = BTreeMap::new();
    for r in records {
        let Some(kind) = r.kind.probe() else { continue };
        let expected = r
            .expected
            .ok_or_else(|| Error::Format(format!("probe record for scene {} lacks a label", r.scene)))?;
        let said_yes = parse_answer(&r.tokens);
        let c = counts.entry(kind).or_default();
        match (said_yes, expected) {
            (true, true) => c[0] += 1,
            (true, false) => c[1] += 1,
            (false, false) => c[2] += 1,
            (false, true) => c[3] += 1,
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyInput("probe records"));
    }
    let per_kind: BTreeMap<ProbeKind, BinaryMetrics> = counts
        .iter()
        .map(|(k, c)| (*k, BinaryMetrics::from_counts(c[0], c[1], c[2], c[3])))
        .collect();
    let n = per_kind.len() as f64;
    let avg = |f: fn(&BinaryMetrics) -> f64| per_kind.values().map(f).sum::<f64>() / n;
    let sum = |i: usize| counts.values().map(|c| c[i]).sum::<usize>();
    let mean = BinaryMetrics {
        accuracy: avg(|m| m.accuracy),
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        tp: sum(0),
        fp: sum(1),
        tn: sum(2),
        fn_: sum(3),
    };
    Ok(PopeScores { per_kind, mean })
}

/// Accuracy on the planted probes only, if there are any.
pub fn planted_accuracy(records: &[EvalRecord]) -> Option<f64> {
    let planted: Vec<&EvalRecord> = records.iter().filter(|r| r.planted).collect();
    if planted.is_empty() {
        return None;
    }
    let ok = planted.iter().filter(|r| r.correct == Some(true)).count();
    Some(ok as f64 / planted.len() as f64)
}
