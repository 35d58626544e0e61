// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight construction: seeded Gaussian initialization and planted heads.

use serde::{Deserialize, Serialize};

use super::{Modality, ModelConfig, Weights, CH_BIAS, CH_SALIENCE, CH_TEXT, CH_VISUAL};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Residual channels `0..RESERVED_CHANNELS` are kept free of content in
/// planted models: bias, visual flag, text flag and salience.
pub const RESERVED_CHANNELS: usize = 4;

const INIT_STD: f32 = 0.02;

/// One head forced to attend to a chosen modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    pub attend: Modality,
    /// Pre-softmax score added to keys of the attended modality.
    pub strength: f32,
    /// Extra score per unit of projected visual salience (visual heads only).
    #[serde(default)]
    pub salience_gain: f32,
}

/// Deterministic construction recipe for a planted model.
///
/// Non-planted parameters come from the same seeded Gaussian init as
/// [`InitMode::SeededRandom`]; reserved channels are then cleared so the
/// modality flags reach every layer exactly, and each planted head gets a
/// query/key pair reading only those flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub seed: u64,
    pub heads: Vec<PlantedHead>,
    /// Feature-space direction projected into the salience channel.
    #[serde(default)]
    pub salience_direction: Option<Vec<f32>>,
}

impl PlantedSpec {
    /// Every listed head attends to text only.
    pub fn text_heads(seed: u64, heads: &[(usize, usize)]) -> Self {
        Self {
            seed,
            heads: heads
                .iter()
                .map(|&(layer, head)| PlantedHead {
                    layer,
                    head,
                    attend: Modality::Text,
                    strength: 12.0,
                    salience_gain: 0.0,
                })
                .collect(),
            salience_direction: None,
        }
    }

    /// All heads prefer visual keys, and prefer salient ones further.
    /// Clean features aligned with `direction` win attention by a margin
    /// that shrinks as the features are corrupted.
    pub fn visually_driven(config: &ModelConfig, seed: u64, direction: Vec<f32>) -> Self {
        let mut heads = Vec::new();
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                heads.push(PlantedHead {
                    layer,
                    head,
                    attend: Modality::Visual,
                    strength: 0.5,
                    salience_gain: 6.0,
                });
            }
        }
        Self {
            seed,
            heads,
            salience_direction: Some(direction),
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if config.d_model < RESERVED_CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "planted models need d_model >= {RESERVED_CHANNELS}"
            )));
        }
        for h in &self.heads {
            if h.layer >= config.n_layers {
                return Err(Error::OutOfRange {
                    what: "planted layer",
                    value: h.layer,
                    limit: config.n_layers,
                });
            }
            if h.head >= config.n_heads {
                return Err(Error::OutOfRange {
                    what: "planted head",
                    value: h.head,
                    limit: config.n_heads,
                });
            }
            if !h.strength.is_finite() || !h.salience_gain.is_finite() {
                return Err(Error::InvalidConfig("planted gains must be finite".into()));
            }
        }
        if let Some(dir) = &self.salience_direction {
            if dir.len() != config.d_model {
                return Err(Error::ShapeMismatch(format!(
                    "salience direction has {} entries, d_model is {}",
                    dir.len(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitMode {
    /// Every entry drawn from Gaussian(0, 0.02).
    SeededRandom {
        seed: u64,
    },
    Planted(PlantedSpec),
}

/// Builds model parameters for `config`.
pub fn build_model(config: &ModelConfig, init: &InitMode) -> Result<Weights> {
    config.validate()?;
    match init {
        InitMode::SeededRandom { seed } => seeded_random(config, *seed),
        InitMode::Planted(spec) => {
            spec.validate(config)?;
            planted(config, spec)
        }
    }
}

fn seeded_random(config: &ModelConfig, seed: u64) -> Result<Weights> {
    let mut w = Weights::zeros(config)?;
    let root = Rng::new(seed);
    for (i, t) in w.tensors_mut().into_iter().enumerate() {
        let mut rng = root.child(i as u64);
        for v in t.data_mut() {
            *v = rng.gaussian() * INIT_STD;
        }
    }
    Ok(w)
}

fn planted(config: &ModelConfig, spec: &PlantedSpec) -> Result<Weights> {
    let mut w = seeded_random(config, spec.seed)?;
    let d = config.d_model;
    let dh = config.d_head;

    for tok in 0..config.vocab_size {
        w.token_embedding.row_mut(tok)[..RESERVED_CHANNELS].fill(0.0);
    }
    for pos in 0..config.max_seq {
        w.position_embedding.row_mut(pos)[..RESERVED_CHANNELS].fill(0.0);
    }
    for ch in 0..RESERVED_CHANNELS {
        w.visual_projection.row_mut(ch).fill(0.0);
        w.visual_bias.data_mut()[ch] = 0.0;
        for layer in &mut w.layers {
            layer.wo.row_mut(ch).fill(0.0);
            layer.ff_out.row_mut(ch).fill(0.0);
            layer.ff_out_bias.data_mut()[ch] = 0.0;
        }
    }
    let vis = w.type_embedding.row_mut(0);
    vis[..RESERVED_CHANNELS].copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
    let text = w.type_embedding.row_mut(1);
    text[..RESERVED_CHANNELS].copy_from_slice(&[1.0, 0.0, 1.0, 0.0]);

    if let Some(dir) = &spec.salience_direction {
        w.visual_projection.row_mut(CH_SALIENCE).copy_from_slice(dir);
    }

    let scale = (dh as f32).sqrt();
    for h in &spec.heads {
        let layer = &mut w.layers[h.layer];
        for r in h.head * dh..(h.head + 1) * dh {
            layer.wq.row_mut(r).fill(0.0);
            layer.wk.row_mut(r).fill(0.0);
        }
        let r = h.head * dh;
        // q·k / sqrt(dh) = strength·flag + gain·salience
        *layer.wq.at_mut(r, CH_BIAS) = scale;
        let flag = match h.attend {
            Modality::Visual => CH_VISUAL,
            Modality::Text => CH_TEXT,
        };
        *layer.wk.at_mut(r, flag) = h.strength;
        if h.attend == Modality::Visual {
            *layer.wk.at_mut(r, CH_SALIENCE) = h.salience_gain;
        }
    }
    debug_assert_eq!(w.visual_projection.cols(), d);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: 32,
            vocab_size: 20,
            n_visual: 4,
            max_seq: 32,
            normalize_visual: true,
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = build_model(&config(), &InitMode::SeededRandom { seed: 7 }).unwrap();
        let b = build_model(&config(), &InitMode::SeededRandom { seed: 7 }).unwrap();
        assert_eq!(a, b);
        let c = build_model(&config(), &InitMode::SeededRandom { seed: 8 }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seeded_init_has_expected_spread() {
        let w = build_model(&config(), &InitMode::SeededRandom { seed: 1 }).unwrap();
        let data = w.token_embedding.data();
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005);
        assert!((var.sqrt() - 0.02).abs() < 0.004, "std {}", var.sqrt());
    }

    #[test]
    fn planted_head_out_of_range_is_rejected() {
        let cfg = config();
        let spec = PlantedSpec::text_heads(1, &[(0, 2)]);
        assert!(matches!(
            build_model(&cfg, &InitMode::Planted(spec)),
            Err(Error::OutOfRange { .. })
        ));
        let spec = PlantedSpec::text_heads(1, &[(2, 0)]);
        assert!(build_model(&cfg, &InitMode::Planted(spec)).is_err());
    }

    #[test]
    fn planted_salience_direction_must_match_width() {
        let cfg = config();
        let spec = PlantedSpec::visually_driven(&cfg, 1, vec![0.0; 3]);
        assert!(build_model(&cfg, &InitMode::Planted(spec)).is_err());
    }
}
