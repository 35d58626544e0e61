// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-branch contrastive decoding with greedy, nucleus and beam search.
//!
//! Every method keeps a positive branch; contrastive methods add a
//! negative branch with its own cache. Both branches consume the same
//! committed tokens. At each step the branch logits become
//! log-probabilities, are fused by [`fuse`], and the strategy picks from
//! the truncated result.

mod fusion;
mod trace;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvCache, MultimodalSequence, TokenInput, Weights};
use crate::numerics::{log_softmax_row_f64, top_k_indices, Rng};
use crate::steering::{CriticalRule, CriticalTokenSet, NegativeEdit, SteeringDirective, SteeringSpec};

pub use fusion::{fuse, CutoffRule, Fused};
pub use trace::{read_trace_jsonl, write_trace_jsonl, TraceEntry, TraceLine, TRACE_TOP};

/// How the next-token distribution is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    Original,
    Ascd {
        spec: SteeringSpec,
        /// Replaces top-score critical-token selection with fixed visual
        /// token indices (random-token controls).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        critical_tokens: Option<Vec<usize>>,
    },
    /// Negative branch sees visual features with additive Gaussian noise.
    Vcd {
        sigma: f32,
        alpha: f32,
        beta: f32,
        seed: u64,
    },
    /// Negative branch sees `prefix` inserted before the prompt.
    Icd {
        prefix: Vec<u32>,
        alpha: f32,
        beta: f32,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Ascd { .. } => "ascd",
            Method::Vcd { .. } => "vcd",
            Method::Icd { .. } => "icd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Greedy,
    Nucleus { top_p: f64, temperature: f64, seed: u64 },
    Beam { width: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Nucleus { .. } => "nucleus",
            Strategy::Beam { .. } => "beam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Greedy => Ok(()),
            Strategy::Nucleus { top_p, temperature, .. } => {
                if !(top_p > 0.0 && top_p <= 1.0) {
                    return Err(Error::InvalidConfig(format!("top_p {top_p} outside (0, 1]")));
                }
                if !(temperature.is_finite() && temperature > 0.0) {
                    return Err(Error::InvalidConfig(format!("temperature {temperature} must be > 0")));
                }
                Ok(())
            }
            Strategy::Beam { width } => {
                if width == 0 {
                    return Err(Error::InvalidConfig("beam width must be >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_tokens: Vec<u32>,
    pub method: Method,
    #[serde(default)]
    pub cutoff: CutoffRule,
    /// Keep a [`StepTrace`] per step.
    #[serde(default)]
    pub trace: bool,
}

impl DecodeConfig {
    pub fn validate(&self, weights: &Weights) -> Result<()> {
        self.strategy.validate()?;
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        match &self.method {
            Method::Original => {}
            Method::Ascd { spec, .. } => spec.validate(&weights.config)?,
            Method::Vcd { sigma, alpha, beta, .. } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::InvalidConfig(format!("vcd sigma must be >= 0, got {sigma}")));
                }
                check_contrast(*alpha, *beta)?;
            }
            Method::Icd { prefix, alpha, beta } => {
                if prefix.is_empty() {
                    return Err(Error::InvalidConfig("icd prefix is empty".into()));
                }
                check_contrast(*alpha, *beta)?;
            }
        }
        Ok(())
    }
}

fn check_contrast(alpha: f32, beta: f32) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("beta must lie in (0, 1], got {beta}")));
    }
    Ok(())
}

/// Everything computed for one generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    /// Positive-branch log-probabilities.
    pub pos: Vec<f64>,
    /// Negative-branch log-probabilities (contrastive methods only).
    pub neg: Option<Vec<f64>>,
    pub raw: Option<Vec<f64>>,
    /// Scores the strategy chose from; masked tokens are negative infinity.
    pub final_scores: Vec<f64>,
    pub cutoff: Option<f64>,
    pub chosen: Option<u32>,
    /// Critical visual tokens chosen in the negative branch, per layer.
    pub critical: Vec<CriticalTokenSet>,
}

impl StepTrace {
    /// `Σ_t |pos_t − neg_t|`; zero for single-branch methods.
    pub fn divergence(&self) -> f64 {
        match &self.neg {
            Some(neg) => self.pos.iter().zip(neg).map(|(p, n)| (p - n).abs()).sum(),
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Branch {
    cache: KvCache,
    pending: TokenInput,
    directive: Option<SteeringDirective>,
}

impl Branch {
    fn start(
        weights: &Weights,
        seq: &MultimodalSequence,
        directive: Option<SteeringDirective>,
        steer_prefill: bool,
    ) -> Result<Self> {
        let mut inputs = seq.inputs();
        let pending = inputs.pop().ok_or(Error::EmptyInput("prompt"))?;
        let mut cache = KvCache::new(weights);
        let prefill_directive = if steer_prefill { directive.as_ref() } else { None };
        weights.extend(&mut cache, &inputs, prefill_directive)?;
        Ok(Self {
            cache,
            pending,
            directive,
        })
    }

    fn feed(&mut self, weights: &Weights) -> Result<(Vec<f64>, Vec<CriticalTokenSet>)> {
        let out = weights.decode_step(&mut self.cache, &self.pending, self.directive.as_ref())?;
        Ok((log_softmax_row_f64(&out.logits)?, out.critical))
    }
}

/// Decoding state of one hypothesis: a positive branch, an optional
/// negative branch, and the tokens generated so far.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pos: Branch,
    neg: Option<Branch>,
    contrast: Option<(f64, f64)>,
    cutoff: CutoffRule,
    tokens: Vec<u32>,
}

impl DecodeState {
    /// Encodes the prompt in every branch. The last prompt position is fed
    /// by the first [`DecodeState::step`], so the token it emits is already
    /// steered.
    pub fn start(weights: &Weights, seq: &MultimodalSequence, method: &Method, cutoff: CutoffRule) -> Result<Self> {
        let (pos, neg, contrast) = match method {
            Method::Original => (Branch::start(weights, seq, None, false)?, None, None),
            Method::Ascd { spec, critical_tokens } => {
                spec.validate(&weights.config)?;
                let mut neg_directive = spec.negative_directive();
                if let Some(tokens) = critical_tokens {
                    neg_directive.negative = Some(NegativeEdit {
                        rule: CriticalRule::Fixed(tokens.clone()),
                        alpha_neg: spec.alpha_neg,
                    });
                }
                let (p, n) = rayon::join(
                    || Branch::start(weights, seq, Some(spec.positive_directive()), spec.steer_prefill),
                    || Branch::start(weights, seq, Some(neg_directive), spec.steer_prefill),
                );
                (p?, Some(n?), Some((spec.alpha as f64, spec.beta as f64)))
            }
            Method::Vcd {
                sigma,
                alpha,
                beta,
                seed,
            } => {
                check_contrast(*alpha, *beta)?;
                let noisy = seq.with_feature_noise(*sigma, &mut Rng::new(*seed))?;
                let (p, n) = rayon::join(
                    || Branch::start(weights, seq, None, false),
                    || Branch::start(weights, &noisy, None, false),
                );
                (p?, Some(n?), Some((*alpha as f64, *beta as f64)))
            }
            Method::Icd { prefix, alpha, beta } => {
                check_contrast(*alpha, *beta)?;
                if prefix.is_empty() {
                    return Err(Error::InvalidConfig("icd prefix is empty".into()));
                }
                let prefixed = seq.with_text_prefix(prefix);
                let (p, n) = rayon::join(
                    || Branch::start(weights, seq, None, false),
                    || Branch::start(weights, &prefixed, None, false),
                );
                (p?, Some(n?), Some((*alpha as f64, *beta as f64)))
            }
        };
        Ok(Self {
            pos,
            neg,
            contrast,
            cutoff,
            tokens: Vec::new(),
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Feeds the pending input to every branch and fuses the results.
    pub fn step(&mut self, weights: &Weights) -> Result<StepTrace> {
        let step = self.tokens.len();
        let (pos, neg) = match &mut self.neg {
            None => (self.pos.feed(weights)?, None),
            Some(neg) => {
                let (p, n) = rayon::join(|| self.pos.feed(weights), || neg.feed(weights));
                (p?, Some(n?))
            }
        };
        let (pos_lp, _) = pos;
        match (neg, self.contrast) {
            (Some((neg_lp, critical)), Some((alpha, beta))) => {
                let f = fuse(&pos_lp, &neg_lp, alpha, beta, self.cutoff)?;
                Ok(StepTrace {
                    step,
                    pos: pos_lp,
                    neg: Some(neg_lp),
                    raw: Some(f.raw),
                    final_scores: f.masked,
                    cutoff: Some(f.cutoff),
                    chosen: None,
                    critical,
                })
            }
            _ => Ok(StepTrace {
                step,
                final_scores: pos_lp.clone(),
                pos: pos_lp,
                neg: None,
                raw: None,
                cutoff: None,
                chosen: None,
                critical: Vec::new(),
            }),
        }
    }

    /// Appends `token` and makes it the next input of every branch.
    pub fn commit(&mut self, token: u32) {
        self.tokens.push(token);
        self.pos.pending = TokenInput::Text(token);
        if let Some(neg) = &mut self.neg {
            neg.pending = TokenInput::Text(token);
        }
    }

    fn room(&self, weights: &Weights) -> usize {
        let used = self
            .neg
            .as_ref()
            .map_or(self.pos.cache.len(), |n| n.cache.len().max(self.pos.cache.len()));
        weights.config.max_seq.saturating_sub(used)
    }
}

/// Result of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, including a final stop token if one was produced.
    pub tokens: Vec<u32>,
    pub traces: Vec<StepTrace>,
}

/// Lowest index among the maximal finite entries.
pub fn argmax_f64(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() || s == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Softmax over finite entries in `f64`; negative infinity maps to 0.
pub fn softmax_f64(scores: &[f64]) -> Result<Vec<f64>> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    if scores.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("scores"));
    }
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Keeps the smallest prefix of tokens, by descending probability (ties to
/// the lower id), whose cumulative mass reaches `top_p`, and renormalizes.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Result<Vec<f64>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidConfig(format!("top_p {top_p} outside (0, 1]")));
    }
    let order = top_k_indices(probs, probs.len())?;
    let mut keep = vec![false; probs.len()];
    let mut cum = 0.0;
    for i in order {
        if probs[i] <= 0.0 {
            break;
        }
        keep[i] = true;
        cum += probs[i];
        if cum >= top_p {
            break;
        }
    }
    let mass: f64 = probs.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| p).sum();
    if mass <= 0.0 {
        return Err(Error::EmptySupport);
    }
    Ok(probs
        .iter()
        .zip(&keep)
        .map(|(p, k)| if *k { p / mass } else { 0.0 })
        .collect())
}

/// Nucleus distribution of `scores` at `temperature`.
pub fn nucleus_distribution(scores: &[f64], top_p: f64, temperature: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    nucleus_filter(&softmax_f64(&scaled)?, top_p)
}

/// Inverse-CDF draw that never returns a zero-probability index.
fn sample_f64(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = Some(i);
        if u < cum {
            return Ok(i);
        }
    }
    last.ok_or(Error::EmptySupport)
}

/// Generates up to `config.max_new_tokens` tokens after `seq`.
pub fn generate(weights: &Weights, seq: &MultimodalSequence, config: &DecodeConfig) -> Result<Generation> {
    config.validate(weights)?;
    let longest = match &config.method {
        Method::Icd { prefix, .. } => seq.len() + prefix.len(),
        _ => seq.len(),
    };
    if longest + config.max_new_tokens > weights.config.max_seq + 1 {
        return Err(Error::SequenceOverflow {
            len: longest + config.max_new_tokens - 1,
            max_seq: weights.config.max_seq,
        });
    }
    let state = DecodeState::start(weights, seq, &config.method, config.cutoff)?;
    match config.strategy {
        Strategy::Greedy => sequential(weights, state, config, |scores| {
            argmax_f64(scores).map(|i| i as u32).ok_or(Error::EmptySupport)
        }),
        Strategy::Nucleus {
            top_p,
            temperature,
            seed,
        } => {
            let mut rng = Rng::new(seed);
            sequential(weights, state, config, |scores| {
                let probs = nucleus_distribution(scores, top_p, temperature)?;
                Ok(sample_f64(&probs, &mut rng)? as u32)
            })
        }
        Strategy::Beam { width } => beam(weights, state, config, width),
    }
}

fn sequential(
    weights: &Weights,
    mut state: DecodeState,
    config: &DecodeConfig,
    mut choose: impl FnMut(&[f64]) -> Result<u32>,
) -> Result<Generation> {
    let mut traces = Vec::new();
    for i in 0..config.max_new_tokens {
        let mut trace = state.step(weights)?;
        let token = choose(&trace.final_scores)?;
        trace.chosen = Some(token);
        if config.trace {
            traces.push(trace);
        }
        state.commit(token);
        if config.stop_tokens.contains(&token) || i + 1 == config.max_new_tokens {
            break;
        }
        if state.room(weights) == 0 {
            break;
        }
    }
    Ok(Generation {
        tokens: state.tokens,
        traces,
    })
}

struct Hyp {
    state: DecodeState,
    score: f64,
    traces: Vec<StepTrace>,
}

fn beam(weights: &Weights, start: DecodeState, config: &DecodeConfig, width: usize) -> Result<Generation> {
    let mut live = vec![Hyp {
        state: start,
        score: 0.0,
        traces: Vec::new(),
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for step in 0..config.max_new_tokens {
        let expanded = live
            .into_par_iter()
            .map(|mut h| {
                let trace = h.state.step(weights)?;
                let lp = log_softmax_row_f64_masked(&trace.final_scores)?;
                Ok((h, trace, lp))
            })
            .collect::<Result<Vec<_>>>()?;

        // (score, beam, token), best first; ties to lower beam then lower id
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (b, (h, _, lp)) in expanded.iter().enumerate() {
            let finite = lp.iter().filter(|v| v.is_finite()).count();
            for t in top_k_indices(lp, width.min(finite).max(1))? {
                if lp[t].is_finite() {
                    candidates.push((h.score + lp[t], b, t as u32));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(width);

        live = Vec::with_capacity(width);
        for (score, b, token) in candidates {
            let (parent, trace, _) = &expanded[b];
            let mut state = parent.state.clone();
            state.commit(token);
            let mut traces = parent.traces.clone();
            if config.trace {
                let mut t = trace.clone();
                t.chosen = Some(token);
                traces.push(t);
            }
            let hyp = Hyp { state, score, traces };
            let out_of_room = hyp.state.room(weights) == 0;
            if config.stop_tokens.contains(&token) || out_of_room {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
        if finished.len() >= width || live.is_empty() || step + 1 == config.max_new_tokens {
            break;
        }
    }
    let pool: Vec<Hyp> = if finished.len() >= width {
        finished
    } else {
        finished.into_iter().chain(live).collect()
    };
    let best = pool
        .into_iter()
        .fold(None::<(f64, Hyp)>, |acc, h| {
            let norm = h.score / h.state.tokens.len().max(1) as f64;
            match acc {
                Some((s, _)) if s >= norm => acc,
                _ => Some((norm, h)),
            }
        })
        .ok_or(Error::EmptySupport)?
        .1;
    Ok(Generation {
        tokens: best.state.tokens,
        traces: best.traces,
    })
}

/// Log-softmax over the finite entries; masked entries stay at negative
/// infinity.
fn log_softmax_row_f64_masked(scores: &[f64]) -> Result<Vec<f64>> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    let sum: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(scores.iter().map(|&s| s - lse).collect())
}

#[cfg(test)]
mod tests;
