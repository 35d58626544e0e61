// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built one-layer model with a text prior that competes with visual
//! evidence.
//!
//! Four heads share one layer:
//! - head 0 reads the instruction and every class token so far; it writes
//!   the task flag (probe or caption) and a history of mentioned classes;
//! - head 1 grounds the answer: text keys get a fixed score and visual keys
//!   a salience score; visual values write class evidence `S`, text values
//!   write the prior channel `P`;
//! - heads 2 and 3 attend to salient visual tokens and write nothing; they
//!   only shape the head-averaged visual attention.
//!
//! The feed-forward block gates the evidence of the queried class into a
//! match channel `M`, and after a bias cue turns text reliance `P` into
//! imagined evidence for the cue's target. "Yes" leans on `M` and `P`, so a
//! model that reads mostly text answers "yes" to likely-but-absent objects
//! and names the target after its cue in captions.

use serde::{Deserialize, Serialize};

use super::vocab::{DESCRIBE, EOS, IS_THERE, NO, YES};
use super::world::{World, WorldConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Weights, CH_BIAS, CH_SALIENCE, CH_TEXT, CH_VISUAL};

const CH_TASK_PROBE: usize = 4;
const CH_TASK_CAPTION: usize = 5;
const CH_MATCH: usize = 6;
const CH_PRIOR: usize = 7;
const FIRST_CLASS_CHANNEL: usize = 8;

/// Four class-indexed channel blocks: current token `A`, seen evidence
/// `S`, per-token class evidence `K` and mention history `H`.
struct Layout {
    n: usize,
}

impl Layout {
    fn asked(&self, k: usize) -> usize {
        FIRST_CLASS_CHANNEL + k
    }
    fn seen(&self, k: usize) -> usize {
        FIRST_CLASS_CHANNEL + self.n + k
    }
    fn evidence(&self, k: usize) -> usize {
        FIRST_CLASS_CHANNEL + 2 * self.n + k
    }
    fn history(&self, k: usize) -> usize {
        FIRST_CLASS_CHANNEL + 3 * self.n + k
    }
}

/// Gains of the hand-built model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorGains {
    /// Key score of instruction tokens in head 0; visual keys get the
    /// negative.
    pub task_focus: f32,
    /// Key score of class tokens in head 0.
    pub history_focus: f32,
    pub history_gain: f32,
    pub ground_text: f32,
    pub ground_visual: f32,
    pub ground_salience: f32,
    pub filler_visual: f32,
    pub filler_salience: f32,
    /// Separates answer tokens from caption tokens.
    pub task_logit: f32,
    pub yes_bias: f32,
    pub no_bias: f32,
    pub yes_match: f32,
    pub yes_prior: f32,
    /// Extra "yes" for any question about a bias target.
    pub target_prior: f32,
    pub caption_seen: f32,
    /// Imagined target evidence per unit of text reliance after a cue.
    pub caption_prior: f32,
    pub eos_bias: f32,
    pub off_task: f32,
}

impl Default for PriorGains {
    fn default() -> Self {
        Self {
            task_focus: 10.0,
            history_focus: 8.0,
            history_gain: 200.0,
            ground_text: 2.7,
            ground_visual: -0.5,
            ground_salience: 2.8,
            filler_visual: 1.0,
            filler_salience: 6.0,
            task_logit: 30.0,
            yes_bias: 0.0,
            no_bias: 7.2,
            yes_match: 100.0,
            yes_prior: 7.0,
            target_prior: 3.4,
            caption_seen: 33.0,
            caption_prior: 0.18,
            eos_bias: 1.7,
            off_task: -20.0,
        }
    }
}

/// Builds the text-prior model matching `world`'s vocabulary and codes.
pub fn build_prior_model(world: &World, gains: &PriorGains) -> Result<Weights> {
    let wc = &world.config;
    let n = wc.n_classes;
    let n_heads = 4;
    let d_head = n + 2;
    let d_model = WorldConfig::prior_model_width(n);
    if wc.feature_dim() != d_model {
        return Err(Error::InvalidConfig(format!(
            "world features are {} wide, the text-prior model needs {d_model}",
            wc.feature_dim()
        )));
    }
    let vocab = world.vocab();
    let config = ModelConfig {
        n_layers: 1,
        n_heads,
        d_model,
        d_head,
        d_ff: n + wc.bias.len(),
        vocab_size: vocab.size(),
        n_visual: wc.n_visual,
        max_seq: wc.n_visual + wc.n_confusers + 16,
        normalize_visual: true,
    };
    let lay = Layout { n };
    let g = gains;
    let s = (d_head as f32).sqrt();
    let mut w = Weights::zeros(&config)?;

    // type rows: constant bias plus modality flags
    *w.type_embedding.at_mut(0, CH_BIAS) = 1.0;
    *w.type_embedding.at_mut(0, CH_VISUAL) = 1.0;
    *w.type_embedding.at_mut(1, CH_BIAS) = 1.0;
    *w.type_embedding.at_mut(1, CH_TEXT) = 1.0;

    *w.token_embedding.at_mut(IS_THERE as usize, CH_TASK_PROBE) = 1.0;
    *w.token_embedding.at_mut(DESCRIBE as usize, CH_TASK_CAPTION) = 1.0;
    for k in 0..n {
        *w.token_embedding.at_mut(vocab.class_token(k) as usize, lay.asked(k)) = 1.0;
    }

    // projector: objectness into salience, class codes into evidence
    w.visual_projection
        .row_mut(CH_SALIENCE)
        .copy_from_slice(world.objectness_code());
    for k in 0..n {
        w.visual_projection
            .row_mut(lay.evidence(k))
            .copy_from_slice(world.class_code(k));
    }

    let layer = &mut w.layers[0];
    // head 0: task flag and mention history
    *layer.wq.at_mut(0, CH_BIAS) = s;
    *layer.wk.at_mut(0, CH_TASK_PROBE) = g.task_focus;
    *layer.wk.at_mut(0, CH_TASK_CAPTION) = g.task_focus;
    *layer.wk.at_mut(0, CH_VISUAL) = -g.task_focus;
    *layer.wv.at_mut(0, CH_TASK_PROBE) = 1.0;
    *layer.wv.at_mut(1, CH_TASK_CAPTION) = 1.0;
    *layer.wo.at_mut(CH_TASK_PROBE, 0) = 1.0;
    *layer.wo.at_mut(CH_TASK_CAPTION, 1) = 1.0;
    for k in 0..n {
        *layer.wk.at_mut(0, lay.asked(k)) = g.history_focus;
        *layer.wv.at_mut(2 + k, lay.asked(k)) = 1.0;
        *layer.wo.at_mut(lay.history(k), 2 + k) = g.history_gain;
    }

    // head 1: grounding head
    let h1 = d_head;
    *layer.wq.at_mut(h1, CH_BIAS) = s;
    *layer.wk.at_mut(h1, CH_TEXT) = g.ground_text;
    *layer.wk.at_mut(h1, CH_VISUAL) = g.ground_visual;
    *layer.wk.at_mut(h1, CH_SALIENCE) = g.ground_salience;
    *layer.wv.at_mut(h1, CH_TEXT) = 1.0;
    *layer.wo.at_mut(CH_PRIOR, h1) = 1.0;
    for k in 0..n {
        *layer.wv.at_mut(h1 + 1 + k, lay.evidence(k)) = 1.0;
        *layer.wo.at_mut(lay.seen(k), h1 + 1 + k) = 1.0;
    }

    // heads 2 and 3: salience fillers
    for h in [2, 3] {
        *layer.wq.at_mut(h * d_head, CH_BIAS) = s;
        *layer.wk.at_mut(h * d_head, CH_VISUAL) = g.filler_visual;
        *layer.wk.at_mut(h * d_head, CH_SALIENCE) = g.filler_salience;
    }

    // feed-forward: queried-class evidence into the match channel, and
    // text reliance after a cue into its target's evidence
    for k in 0..n {
        *layer.ff_in.at_mut(k, lay.seen(k)) = 1.0;
        *layer.ff_in.at_mut(k, lay.asked(k)) = 1.0;
        layer.ff_in_bias.data_mut()[k] = -1.0;
        *layer.ff_out.at_mut(CH_MATCH, k) = 1.0;
    }
    for (i, b) in wc.bias.iter().enumerate() {
        let unit = n + i;
        *layer.ff_in.at_mut(unit, CH_PRIOR) = 1.0;
        *layer.ff_in.at_mut(unit, lay.asked(b.cue)) = 1.0;
        layer.ff_in_bias.data_mut()[unit] = -1.0;
        *layer.ff_out.at_mut(lay.seen(b.target), unit) = g.caption_prior;
    }

    // unembedding
    let v = config.vocab_size;
    w.unembedding_bias.data_mut().fill(g.off_task);
    let bt = g.task_logit;
    for (t, bias) in [(YES, g.yes_bias), (NO, g.no_bias)] {
        let t = t as usize;
        *w.unembedding.at_mut(t, CH_TASK_PROBE) = bt;
        *w.unembedding.at_mut(t, CH_TASK_CAPTION) = -bt;
        w.unembedding_bias.data_mut()[t] = bias;
    }
    let yes = YES as usize;
    *w.unembedding.at_mut(yes, CH_MATCH) = g.yes_match;
    *w.unembedding.at_mut(yes, CH_PRIOR) = g.yes_prior;
    for b in &wc.bias {
        *w.unembedding.at_mut(yes, lay.asked(b.target)) += g.target_prior;
    }
    for k in 0..n {
        let t = vocab.class_token(k) as usize;
        *w.unembedding.at_mut(t, CH_TASK_CAPTION) = bt;
        *w.unembedding.at_mut(t, CH_TASK_PROBE) = -bt;
        *w.unembedding.at_mut(t, lay.seen(k)) = g.caption_seen;
        *w.unembedding.at_mut(t, lay.history(k)) = -1.0;
        w.unembedding_bias.data_mut()[t] = 0.0;
    }
    let eos = EOS as usize;
    *w.unembedding.at_mut(eos, CH_TASK_CAPTION) = bt;
    *w.unembedding.at_mut(eos, CH_TASK_PROBE) = -bt;
    w.unembedding_bias.data_mut()[eos] = g.eos_bias;
    debug_assert!(lay.history(n - 1) < d_model && v == vocab.size());
    Ok(w)
}
