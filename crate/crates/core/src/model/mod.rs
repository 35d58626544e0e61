// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small decoder-only multimodal transformer.
//!
//! Visual feature vectors occupy the first `n_visual` positions and text
//! tokens follow. Each layer runs causal multi-head self-attention and a
//! ReLU feed-forward block on a residual stream without normalization
//! layers; the attention of every step can be edited by a
//! [`SteeringDirective`] and is reported as [`AttentionRecord`]s.

mod build;
mod forward;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub use build::{build_model, InitMode, PlantedHead, PlantedSpec, RESERVED_CHANNELS};
pub use forward::{attention_mass, AttentionRecord, HeadMass, KvCache, MassReport, StepOutput};
pub use io::{read_envelope, write_envelope, Envelope};

pub use crate::steering::SteeringDirective;

/// Reserved residual channel carrying a constant 1 in planted models.
pub const CH_BIAS: usize = 0;
/// Reserved residual channel set to 1 at visual positions in planted models.
pub const CH_VISUAL: usize = 1;
/// Reserved residual channel set to 1 at text positions in planted models.
pub const CH_TEXT: usize = 2;
/// Reserved residual channel carrying the projected visual salience.
pub const CH_SALIENCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

/// Architecture dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Number of visual tokens prepended to every sequence.
    pub n_visual: usize,
    pub max_seq: usize,
    /// Scale each visual feature vector to unit L2 norm before projection.
    #[serde(default = "default_true")]
    pub normalize_visual: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_visual", self.n_visual),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_visual >= self.max_seq {
            return Err(Error::InvalidConfig(format!(
                "n_visual {} must be below max_seq {}",
                self.n_visual, self.max_seq
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// One input position: a text token id or a visual feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenInput {
    Text(u32),
    Visual(Vec<f32>),
}

impl TokenInput {
    pub fn modality(&self) -> Modality {
        match self {
            TokenInput::Text(_) => Modality::Text,
            TokenInput::Visual(_) => Modality::Visual,
        }
    }
}

/// An image (as projected feature vectors) followed by text token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSequence {
    pub visual_features: Vec<Vec<f32>>,
    pub text_ids: Vec<u32>,
}

impl MultimodalSequence {
    pub fn new(visual_features: Vec<Vec<f32>>, text_ids: Vec<u32>) -> Self {
        Self {
            visual_features,
            text_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.visual_features.len() + self.text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-position modality flags; visual positions are exactly `0..V`.
    pub fn modality_mask(&self) -> Vec<Modality> {
        let mut mask = vec![Modality::Visual; self.visual_features.len()];
        mask.extend(std::iter::repeat_n(Modality::Text, self.text_ids.len()));
        mask
    }

    pub fn inputs(&self) -> Vec<TokenInput> {
        self.visual_features
            .iter()
            .map(|f| TokenInput::Visual(f.clone()))
            .chain(self.text_ids.iter().map(|&t| TokenInput::Text(t)))
            .collect()
    }

    /// Same prompt with `sigma`-scaled Gaussian noise added to every visual
    /// feature.
    pub fn with_feature_noise(&self, sigma: f32, rng: &mut Rng) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {sigma}")));
        }
        let visual = self
            .visual_features
            .iter()
            .map(|f| f.iter().map(|v| v + sigma * rng.gaussian()).collect())
            .collect();
        Ok(Self::new(visual, self.text_ids.clone()))
    }

    /// Same image with `prefix` inserted before the text prompt.
    pub fn with_text_prefix(&self, prefix: &[u32]) -> Self {
        let mut text = prefix.to_vec();
        text.extend_from_slice(&self.text_ids);
        Self::new(self.visual_features.clone(), text)
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

/// Full parameter set. Immutable once built and safe to share across
/// decoding branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    /// Row 0 is added at visual positions, row 1 at text positions.
    pub type_embedding: Tensor,
    pub position_embedding: Tensor,
    pub visual_projection: Tensor,
    pub visual_bias: Tensor,
    pub layers: Vec<LayerWeights>,
    pub unembedding: Tensor,
    pub unembedding_bias: Tensor,
}

impl Weights {
    /// All-zero parameters with shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let shapes = tensor_shapes(config);
        let mut named: Vec<(String, Tensor)> = shapes
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        Self::from_named(config.clone(), &mut named)
    }

    /// Tensors in manifest order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("type_embedding".into(), &self.type_embedding),
            ("position_embedding".into(), &self.position_embedding),
            ("visual_projection".into(), &self.visual_projection),
            ("visual_bias".into(), &self.visual_bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.wq"), &layer.wq));
            out.push((format!("layers.{l}.wk"), &layer.wk));
            out.push((format!("layers.{l}.wv"), &layer.wv));
            out.push((format!("layers.{l}.wo"), &layer.wo));
            out.push((format!("layers.{l}.ff_in"), &layer.ff_in));
            out.push((format!("layers.{l}.ff_in_bias"), &layer.ff_in_bias));
            out.push((format!("layers.{l}.ff_out"), &layer.ff_out));
            out.push((format!("layers.{l}.ff_out_bias"), &layer.ff_out_bias));
        }
        out.push(("unembedding".into(), &self.unembedding));
        out.push(("unembedding_bias".into(), &self.unembedding_bias));
        out
    }

    /// Mutable view of every tensor, in manifest order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.token_embedding,
            &mut self.type_embedding,
            &mut self.position_embedding,
            &mut self.visual_projection,
            &mut self.visual_bias,
        ];
        for layer in &mut self.layers {
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.ff_in);
            out.push(&mut layer.ff_in_bias);
            out.push(&mut layer.ff_out);
            out.push(&mut layer.ff_out_bias);
        }
        out.push(&mut self.unembedding);
        out.push(&mut self.unembedding_bias);
        out
    }

    /// Assembles weights from `(name, tensor)` pairs, checking every shape.
    pub fn from_named(config: ModelConfig, named: &mut [(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let expected = tensor_shapes(&config);
        if expected.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut take = |i: usize| -> Result<Tensor> {
            let (exp_name, exp_shape) = &expected[i];
            let (name, t) = &mut named[i];
            if name != exp_name || t.shape() != exp_shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {i}: expected {exp_name} {exp_shape:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("weight tensor"));
            }
            Ok(std::mem::replace(t, Tensor::zeros(vec![0])))
        };
        let token_embedding = take(0)?;
        let type_embedding = take(1)?;
        let position_embedding = take(2)?;
        let visual_projection = take(3)?;
        let visual_bias = take(4)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let base = 5 + 8 * l;
            layers.push(LayerWeights {
                wq: take(base)?,
                wk: take(base + 1)?,
                wv: take(base + 2)?,
                wo: take(base + 3)?,
                ff_in: take(base + 4)?,
                ff_in_bias: take(base + 5)?,
                ff_out: take(base + 6)?,
                ff_out_bias: take(base + 7)?,
            });
        }
        let tail = 5 + 8 * config.n_layers;
        let unembedding = take(tail)?;
        let unembedding_bias = take(tail + 1)?;
        Ok(Self {
            config,
            token_embedding,
            type_embedding,
            position_embedding,
            visual_projection,
            visual_bias,
            layers,
            unembedding,
            unembedding_bias,
        })
    }
}

/// Manifest names and shapes implied by a config.
pub fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        ("token_embedding".to_string(), vec![config.vocab_size, d]),
        ("type_embedding".to_string(), vec![2, d]),
        ("position_embedding".to_string(), vec![config.max_seq, d]),
        ("visual_projection".to_string(), vec![d, d]),
        ("visual_bias".to_string(), vec![d]),
    ];
    for l in 0..config.n_layers {
        out.push((format!("layers.{l}.wq"), vec![d, d]));
        out.push((format!("layers.{l}.wk"), vec![d, d]));
        out.push((format!("layers.{l}.wv"), vec![d, d]));
        out.push((format!("layers.{l}.wo"), vec![d, d]));
        out.push((format!("layers.{l}.ff_in"), vec![config.d_ff, d]));
        out.push((format!("layers.{l}.ff_in_bias"), vec![config.d_ff]));
        out.push((format!("layers.{l}.ff_out"), vec![d, config.d_ff]));
        out.push((format!("layers.{l}.ff_out_bias"), vec![d]));
    }
    out.push(("unembedding".to_string(), vec![config.vocab_size, d]));
    out.push(("unembedding_bias".to_string(), vec![config.vocab_size]));
    out
}
