// SPDX-License-Identifier: MIT OR Apache-2.0

//! Incremental forward pass with a KV cache and steerable attention.

use serde::{Deserialize, Serialize};

use super::{Modality, MultimodalSequence, TokenInput, Weights};
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_row};
use crate::steering::{
    head_mean_visual, negative_edit_in_place, positive_edit_in_place, select_critical_visible, CritSource,
    CriticalRule, CriticalTokenSet, EditStage, SteeringDirective,
};

/// Attention of one head at one query position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub query_position: usize,
    /// Scaled scores `q·k/√d_head` over key positions `0..=query_position`,
    /// before any steering edit.
    pub pre_norm_scores: Vec<f32>,
    /// The row after steering edits (scores for pre-softmax edits, weights
    /// for post-softmax edits); `None` when the head was not edited.
    pub edited_row: Option<Vec<f32>>,
    pub post_norm_weights: Vec<f32>,
}

/// Result of feeding one position.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub position: usize,
    /// Unnormalized next-token logits.
    pub logits: Vec<f32>,
    /// One record per `(layer, head)`, layer-major.
    pub records: Vec<AttentionRecord>,
    /// Critical visual tokens per layer (negative steering only).
    pub critical: Vec<CriticalTokenSet>,
}

/// Per-layer keys and values for every position fed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_model: usize,
    max_seq: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    modality: Vec<Modality>,
}

impl KvCache {
    pub fn new(weights: &Weights) -> Self {
        let c = &weights.config;
        Self {
            d_model: c.d_model,
            max_seq: c.max_seq,
            keys: vec![Vec::new(); c.n_layers],
            values: vec![Vec::new(); c.n_layers],
            modality: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn modality_mask(&self) -> &[Modality] {
        &self.modality
    }

    fn key(&self, layer: usize, pos: usize) -> &[f32] {
        &self.keys[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    fn value(&self, layer: usize, pos: usize) -> &[f32] {
        &self.values[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }
}

struct Pending {
    logits: Vec<f32>,
    records: Vec<AttentionRecord>,
    critical: Vec<CriticalTokenSet>,
    kv: Vec<(Vec<f32>, Vec<f32>)>,
    modality: Modality,
}

/// Negative-steering positions, resolved for the current query.
enum NegPlan {
    None,
    PerLayer(crate::steering::KappaVis),
    Positions(Vec<usize>),
}

impl Weights {
    fn embed(&self, input: &TokenInput, position: usize) -> Result<Vec<f32>> {
        let c = &self.config;
        let (mut x, type_row) = match input {
            TokenInput::Text(id) => {
                let id = *id as usize;
                if id >= c.vocab_size {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        value: id,
                        limit: c.vocab_size,
                    });
                }
                (self.token_embedding.row(id).to_vec(), 1)
            }
            TokenInput::Visual(f) => {
                if f.len() != c.d_model {
                    return Err(Error::ShapeMismatch(format!(
                        "visual feature has {} entries, d_model is {}",
                        f.len(),
                        c.d_model
                    )));
                }
                if !f.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("visual feature"));
                }
                let mut feat = f.clone();
                if c.normalize_visual {
                    let norm = feat.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        for v in &mut feat {
                            *v = (*v as f64 / norm) as f32;
                        }
                    }
                }
                let mut x = self.visual_projection.matvec(&feat);
                for (xi, b) in x.iter_mut().zip(self.visual_bias.data()) {
                    *xi += b;
                }
                (x, 0)
            }
        };
        for ((xi, t), p) in x
            .iter_mut()
            .zip(self.type_embedding.row(type_row))
            .zip(self.position_embedding.row(position))
        {
            *xi += t + p;
        }
        Ok(x)
    }

    fn run_position(
        &self,
        cache: &KvCache,
        input: &TokenInput,
        directive: Option<&SteeringDirective>,
        neg: &NegPlan,
    ) -> Result<Pending> {
        let c = &self.config;
        let pos = cache.len();
        let dh = c.d_head;
        let inv_scale = 1.0 / (dh as f32).sqrt();
        let modality = input.modality();

        let mut visual_positions: Vec<usize> = cache
            .modality
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == Modality::Visual)
            .map(|(i, _)| i)
            .collect();
        if modality == Modality::Visual {
            visual_positions.push(pos);
        }

        let mut x = self.embed(input, pos)?;
        let mut records = Vec::with_capacity(c.n_cells());
        let mut critical = Vec::new();
        let mut kv = Vec::with_capacity(c.n_layers);
        let positive = directive.and_then(|d| d.positive.as_ref());
        let stage = directive.map(|d| d.stage).unwrap_or_default();
        let alpha_neg = directive
            .and_then(|d| d.negative.as_ref())
            .map(|n| n.alpha_neg)
            .unwrap_or(0.0);

        for (l, layer) in self.layers.iter().enumerate() {
            let q = layer.wq.matvec(&x);
            let k = layer.wk.matvec(&x);
            let v = layer.wv.matvec(&x);

            let raw: Vec<Vec<f32>> = (0..c.n_heads)
                .map(|h| {
                    let qh = &q[h * dh..(h + 1) * dh];
                    (0..=pos)
                        .map(|j| {
                            let kj = if j == pos { &k[..] } else { cache.key(l, j) };
                            dot(qh, &kj[h * dh..(h + 1) * dh]) * inv_scale
                        })
                        .collect()
                })
                .collect();

            let mut unedited: Option<Vec<Vec<f32>>> = None;
            let crit_positions: Vec<usize> = match neg {
                NegPlan::None => Vec::new(),
                NegPlan::Positions(p) => p.clone(),
                NegPlan::PerLayer(kappa) => {
                    if visual_positions.is_empty() {
                        Vec::new()
                    } else {
                        let rows = raw.iter().map(|r| softmax_row(r)).collect::<Result<Vec<_>>>()?;
                        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
                        let s = head_mean_visual(&refs, &visual_positions);
                        let idx = select_critical_visible(&s, *kappa, c.n_visual)?;
                        critical.push(CriticalTokenSet {
                            layer: l,
                            scores: idx.iter().map(|&i| s[i]).collect(),
                            tokens: idx.clone(),
                        });
                        unedited = Some(rows);
                        idx.iter().map(|&i| visual_positions[i]).collect()
                    }
                }
            };

            let mut head_out = vec![0.0f32; c.d_model];
            for (h, scores) in raw.into_iter().enumerate() {
                let pos_here = positive.filter(|p| p.heads.contains(l, h));
                let edits = pos_here.is_some() || !crit_positions.is_empty();
                let (weights, edited_row) = if !edits {
                    let w = match &unedited {
                        Some(rows) => rows[h].clone(),
                        None => softmax_row(&scores)?,
                    };
                    (w, None)
                } else {
                    match stage {
                        EditStage::PreSoftmax => {
                            let mut e = scores.clone();
                            if let Some(p) = pos_here {
                                positive_edit_in_place(&mut e, &visual_positions, p.alpha_pos, p.scope);
                            }
                            negative_edit_in_place(&mut e, &crit_positions, alpha_neg)?;
                            let w = softmax_row(&e)?;
                            (w, Some(e))
                        }
                        EditStage::PostSoftmaxRenorm => {
                            let w0 = match &unedited {
                                Some(rows) => rows[h].clone(),
                                None => softmax_row(&scores)?,
                            };
                            let mut e = w0.clone();
                            if let Some(p) = pos_here {
                                positive_edit_in_place(&mut e, &visual_positions, p.alpha_pos, p.scope);
                            }
                            negative_edit_in_place(&mut e, &crit_positions, alpha_neg)?;
                            for w in &mut e {
                                *w = w.max(0.0);
                            }
                            let sum: f64 = e.iter().map(|&w| w as f64).sum();
                            if e == w0 || sum <= 0.0 {
                                // an edit that zeroes every visible key leaves the row as it was
                                (w0, Some(e))
                            } else {
                                let w = e.iter().map(|&w| (w as f64 / sum) as f32).collect();
                                (w, Some(e))
                            }
                        }
                    }
                };

                let out = &mut head_out[h * dh..(h + 1) * dh];
                for (j, &w) in weights.iter().enumerate() {
                    let vj = if j == pos { &v[..] } else { cache.value(l, j) };
                    for (o, val) in out.iter_mut().zip(&vj[h * dh..(h + 1) * dh]) {
                        *o += w * val;
                    }
                }
                records.push(AttentionRecord {
                    layer: l,
                    head: h,
                    query_position: pos,
                    pre_norm_scores: scores,
                    edited_row,
                    post_norm_weights: weights,
                });
            }

            for (xi, a) in x.iter_mut().zip(layer.wo.matvec(&head_out)) {
                *xi += a;
            }
            let mut hidden = layer.ff_in.matvec(&x);
            for (hv, b) in hidden.iter_mut().zip(layer.ff_in_bias.data()) {
                *hv = (*hv + b).max(0.0);
            }
            for ((xi, f), b) in x
                .iter_mut()
                .zip(layer.ff_out.matvec(&hidden))
                .zip(layer.ff_out_bias.data())
            {
                *xi += f + b;
            }
            kv.push((k, v));
        }

        let mut logits = self.unembedding.matvec(&x);
        for (lg, b) in logits.iter_mut().zip(self.unembedding_bias.data()) {
            *lg += b;
        }
        Ok(Pending {
            logits,
            records,
            critical,
            kv,
            modality,
        })
    }

    /// Feeds one position, optionally under a steering directive, and
    /// appends its keys and values to `cache`.
    pub fn decode_step(
        &self,
        cache: &mut KvCache,
        input: &TokenInput,
        directive: Option<&SteeringDirective>,
    ) -> Result<StepOutput> {
        let c = &self.config;
        if cache.len() >= c.max_seq {
            return Err(Error::SequenceOverflow {
                len: cache.len() + 1,
                max_seq: c.max_seq,
            });
        }
        if let Some(d) = directive {
            d.validate(c)?;
        }

        let n_visual_now = cache.modality.iter().filter(|m| **m == Modality::Visual).count()
            + usize::from(input.modality() == Modality::Visual);
        let neg = match directive.and_then(|d| d.negative.as_ref()) {
            None => NegPlan::None,
            Some(n) => match &n.rule {
                CriticalRule::TopScore {
                    kappa,
                    source: CritSource::PerLayer,
                } => NegPlan::PerLayer(*kappa),
                CriticalRule::TopScore {
                    kappa,
                    source: CritSource::FinalLayer,
                } => {
                    if n_visual_now == 0 {
                        NegPlan::None
                    } else {
                        // unsteered probe pass ranks tokens by last-layer attention
                        let probe = self.run_position(cache, input, None, &NegPlan::None)?;
                        let last = c.n_layers - 1;
                        let rows: Vec<&[f32]> = probe
                            .records
                            .iter()
                            .filter(|r| r.layer == last)
                            .map(|r| r.post_norm_weights.as_slice())
                            .collect();
                        let visual: Vec<usize> = (0..cache.len() + 1)
                            .filter(|&p| cache.modality.get(p).copied().unwrap_or(input.modality()) == Modality::Visual)
                            .collect();
                        let s = head_mean_visual(&rows, &visual);
                        let idx = select_critical_visible(&s, *kappa, c.n_visual)?;
                        NegPlan::Positions(idx.iter().map(|&i| visual[i]).collect())
                    }
                }
                CriticalRule::Fixed(tokens) => {
                    let visual: Vec<usize> = (0..cache.len() + 1)
                        .filter(|&p| cache.modality.get(p).copied().unwrap_or(input.modality()) == Modality::Visual)
                        .collect();
                    let positions = tokens
                        .iter()
                        .map(|&t| {
                            visual.get(t).copied().ok_or(Error::OutOfRange {
                                what: "critical visual token",
                                value: t,
                                limit: visual.len(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    NegPlan::Positions(positions)
                }
            },
        };

        let pending = self.run_position(cache, input, directive, &neg)?;
        let mut critical = pending.critical;
        if critical.is_empty() {
            if let NegPlan::Positions(p) = &neg {
                critical = (0..c.n_layers)
                    .map(|layer| CriticalTokenSet {
                        layer,
                        tokens: p.clone(),
                        scores: Vec::new(),
                    })
                    .collect();
            }
        }
        let position = cache.len();
        for (l, (k, v)) in pending.kv.into_iter().enumerate() {
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
        }
        cache.modality.push(pending.modality);
        Ok(StepOutput {
            position,
            logits: pending.logits,
            records: pending.records,
            critical,
        })
    }

    /// Feeds `inputs` in order and returns the output of the last one.
    pub fn extend(
        &self,
        cache: &mut KvCache,
        inputs: &[TokenInput],
        directive: Option<&SteeringDirective>,
    ) -> Result<Option<StepOutput>> {
        let c = &self.config;
        if cache.len() + inputs.len() > c.max_seq {
            return Err(Error::SequenceOverflow {
                len: cache.len() + inputs.len(),
                max_seq: c.max_seq,
            });
        }
        let mut last = None;
        for input in inputs {
            last = Some(self.decode_step(cache, input, directive)?);
        }
        Ok(last)
    }

    /// Encodes a prompt without steering; returns the filled cache and the
    /// output at the last position (next-token logits and its records).
    pub fn prefill(&self, seq: &MultimodalSequence) -> Result<(KvCache, StepOutput)> {
        self.prefill_steered(seq, None)
    }

    /// [`Weights::prefill`] with an optional directive applied at every
    /// prompt position (experimental).
    pub fn prefill_steered(
        &self,
        seq: &MultimodalSequence,
        directive: Option<&SteeringDirective>,
    ) -> Result<(KvCache, StepOutput)> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("sequence"));
        }
        let mut cache = KvCache::new(self);
        let out = self
            .extend(&mut cache, &seq.inputs(), directive)?
            .expect("nonempty sequence");
        Ok((cache, out))
    }

    /// Next-token logits at every position of `seq`.
    pub fn forward_all(&self, seq: &MultimodalSequence) -> Result<Vec<Vec<f32>>> {
        if seq.len() > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                len: seq.len(),
                max_seq: self.config.max_seq,
            });
        }
        let mut cache = KvCache::new(self);
        seq.inputs()
            .iter()
            .map(|inp| Ok(self.decode_step(&mut cache, inp, None)?.logits))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Attention mass
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMass {
    pub layer: usize,
    pub head: usize,
    pub vis: f64,
    pub text: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassReport {
    pub per_head: Vec<HeadMass>,
    pub mean_vis: f64,
    pub mean_text: f64,
}

/// Visual and text attention mass of each record, and their mean.
pub fn attention_mass(records: &[AttentionRecord], modality_mask: &[Modality]) -> Result<MassReport> {
    let first = records.first().ok_or(Error::EmptyInput("attention records"))?;
    let mut per_head = Vec::with_capacity(records.len());
    for r in records {
        if r.query_position != first.query_position {
            return Err(Error::ShapeMismatch(
                "records cover more than one query position".into(),
            ));
        }
        if r.post_norm_weights.len() > modality_mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights but modality mask of length {}",
                r.post_norm_weights.len(),
                modality_mask.len()
            )));
        }
        let (mut vis, mut text) = (0.0f64, 0.0f64);
        for (w, m) in r.post_norm_weights.iter().zip(modality_mask) {
            match m {
                Modality::Visual => vis += *w as f64,
                Modality::Text => text += *w as f64,
            }
        }
        per_head.push(HeadMass {
            layer: r.layer,
            head: r.head,
            vis,
            text,
        });
    }
    let n = per_head.len() as f64;
    let mean_vis = per_head.iter().map(|m| m.vis).sum::<f64>() / n;
    let mean_text = per_head.iter().map(|m| m.text).sum::<f64>() / n;
    Ok(MassReport {
        per_head,
        mean_vis,
        mean_text,
    })
}
