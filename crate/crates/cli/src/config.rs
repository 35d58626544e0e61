// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use ascd_core::decoder::{CutoffRule, Strategy};
use ascd_core::model::{build_model, InitMode, ModelConfig, Weights};
use ascd_core::steering::SteeringSpec;
use ascd_core::synth::{build_prior_model, EvalSpec, MethodSpec, PriorGains, SweepGrid, World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WorldSource {
    /// Generated from `config`, with the run seed.
    Generate {
        #[serde(default)]
        config: WorldConfig,
    },
    /// Files written by `worldgen`.
    Files { json: PathBuf, features: PathBuf },
}

impl Default for WorldSource {
    fn default() -> Self {
        WorldSource::Generate {
            config: WorldConfig::default(),
        }
    }
}

/// Where model weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelSource {
    /// Hand-built text-prior model matched to the world.
    Prior {
        #[serde(default)]
        gains: PriorGains,
    },
    /// ASCDW1 weight file.
    File { path: PathBuf },
    /// Seeded random or planted weights.
    Init { config: ModelConfig, init: InitMode },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Prior {
            gains: PriorGains::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSettings {
    pub vote_k: usize,
    /// Heads kept as text-centric; clamped to the number of heads.
    pub kappa_tch: usize,
    pub max_new_tokens: usize,
    /// Reference scenes used for voting; all scenes when absent.
    pub n_samples: Option<usize>,
    /// Existing profile; defaults to `profile.json` in the output directory.
    pub artifact: Option<PathBuf>,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            vote_k: 32,
            kappa_tch: 32,
            max_new_tokens: 4,
            n_samples: None,
            artifact: None,
        }
    }
}

/// What `decode` generates for.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSpec {
    pub scene: usize,
    /// Ask about this class instead of captioning.
    pub probe_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub method: String,
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub cutoff: CutoffRule,
    pub vcd_sigma: f32,
    pub icd_prefix: Option<Vec<u32>>,
    pub prompt: PromptSpec,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            method: "ascd".into(),
            strategy: Strategy::Greedy,
            max_new_tokens: 6,
            cutoff: CutoffRule::Fused,
            vcd_sigma: 1.0,
            icd_prefix: None,
            prompt: PromptSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed: replaces the world seed and the evaluation seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldSource,
    pub model: ModelSource,
    pub profile: ProfileSettings,
    pub steering: SteeringSpec,
    pub decode: DecodeSettings,
    pub eval: EvalSpec,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("ascd-out"),
            world: WorldSource::default(),
            model: ModelSource::default(),
            profile: ProfileSettings::default(),
            steering: SteeringSpec::default(),
            decode: DecodeSettings::default(),
            eval: EvalSpec {
                methods: ["original", "ascd", "vcd", "icd"]
                    .iter()
                    .map(|m| MethodSpec::parse(m).expect("known method"))
                    .collect(),
                ..EvalSpec::default()
            },
            sweep: SweepGrid {
                alpha_pos: vec![0.3, 0.6, 1.0],
                alpha: vec![0.5, 1.0, 2.0],
                beta: vec![0.05, 0.1, 0.2],
                kappa_tch: vec![1, 2, 4],
                kappa_vis: Vec::new(),
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config not found: {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
    }

    /// Pushes the master seed and shared steering knobs into sub-configs.
    pub fn resolve(&mut self) {
        if let WorldSource::Generate { config } = &mut self.world {
            config.seed = self.seed;
        }
        self.eval.seed = self.seed;
        self.eval.steering = self.steering.clone();
    }

    pub fn world(&self) -> Result<World, CliError> {
        match &self.world {
            WorldSource::Generate { config } => Ok(World::generate(config)?),
            WorldSource::Files { json, features } => {
                for p in [json, features] {
                    if !p.exists() {
                        return Err(CliError::usage(format!("world not found: {}", p.display())));
                    }
                }
                Ok(World::load(json, features)?)
            }
        }
    }

    pub fn weights(&self, world: &World) -> Result<Weights, CliError> {
        match &self.model {
            ModelSource::Prior { gains } => Ok(build_prior_model(world, gains)?),
            ModelSource::File { path } => {
                if !path.exists() {
                    return Err(CliError::usage(format!("model not found: {}", path.display())));
                }
                Ok(Weights::load(path)?)
            }
            ModelSource::Init { config, init } => Ok(build_model(config, init)?),
        }
    }

    pub fn profile_path(&self) -> PathBuf {
        self.profile
            .artifact
            .clone()
            .unwrap_or_else(|| self.out_dir.join("profile.json"))
    }
}
