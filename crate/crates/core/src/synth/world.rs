// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic scenes with class-conditioned visual features.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::{read_envelope, write_envelope, MultimodalSequence};
use crate::numerics::{Rng, Tensor};

const CLASS_NAMES: [&str; 16] = [
    "person", "dog", "table", "cup", "car", "chair", "bottle", "bicycle", "cat", "bus", "bowl", "horse", "laptop",
    "bird", "boat", "clock",
];

/// A spurious text prior: `target` is added to scenes containing `cue`
/// with probability `prob`, so the pair co-occurs often but not always.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPair {
    pub cue: usize,
    pub target: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub n_scenes: usize,
    pub n_attributes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub tokens_per_object: usize,
    /// Visual tokens per scene.
    pub n_visual: usize,
    /// Feature width; `None` picks the width of the matching text-prior
    /// model.
    pub feature_dim: Option<usize>,
    pub feature_noise: f32,
    pub attribute_scale: f32,
    /// Class `k` is drawn with weight `1 / (k+1)^zipf_exponent`.
    pub zipf_exponent: f64,
    pub bias: Vec<BiasPair>,
    pub n_confusers: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_scenes: 50,
            n_attributes: 3,
            min_objects: 1,
            max_objects: 4,
            tokens_per_object: 2,
            n_visual: 12,
            feature_dim: None,
            feature_noise: 0.05,
            attribute_scale: 0.3,
            zipf_exponent: 1.0,
            bias: vec![BiasPair {
                cue: 2,
                target: 3,
                prob: 0.5,
            }],
            n_confusers: 2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Width of the hand-built text-prior model for `n_classes`.
    pub fn prior_model_width(n_classes: usize) -> usize {
        4 * (n_classes + 2)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
            .unwrap_or_else(|| Self::prior_model_width(self.n_classes))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_classes: self.n_classes,
            n_confusers: self.n_confusers,
        }
    }

    fn n_codes(&self) -> usize {
        2 + self.n_classes + self.n_attributes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_classes < 4 {
            return bad(format!("ontology needs at least 4 classes, got {}", self.n_classes));
        }
        if self.n_scenes == 0 {
            return bad("n_scenes must be >= 1".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 8 {
            return bad(format!(
                "object counts must satisfy 1 <= min <= max <= 8, got {}..={}",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.n_classes {
            return bad("max_objects exceeds the number of classes".into());
        }
        if self.tokens_per_object == 0 || self.n_visual < self.max_objects * self.tokens_per_object {
            return bad(format!(
                "n_visual {} cannot hold {} objects of {} tokens",
                self.n_visual, self.max_objects, self.tokens_per_object
            ));
        }
        if self.feature_dim() < self.n_codes() {
            return bad(format!(
                "feature_dim {} is below the {} orthogonal codes needed",
                self.feature_dim(),
                self.n_codes()
            ));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return bad("feature_noise must be >= 0".into());
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be >= 0".into());
        }
        for b in &self.bias {
            if b.cue >= self.n_classes || b.target >= self.n_classes || b.cue == b.target {
                return bad(format!("bias pair {}->{} is invalid", b.cue, b.target));
            }
            if !(0.0..=1.0).contains(&b.prob) {
                return bad(format!("bias probability {} outside [0, 1]", b.prob));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub attributes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub id: usize,
    pub objects: Vec<SceneObject>,
    /// Object index shown at each visual token, `None` for background.
    pub layout: Vec<Option<usize>>,
    pub seed: u64,
}

impl SceneGraph {
    pub fn contains(&self, class: usize) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class).collect()
    }
}

/// Scenes, their features and co-occurrence statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub ontology: Vec<String>,
    pub scenes: Vec<SceneGraph>,
    /// `cooccurrence[a][b]`: scenes containing both `a` and `b` (`a != b`);
    /// the diagonal is zero.
    pub cooccurrence: Vec<Vec<u64>>,
    /// Scenes containing each class.
    pub class_counts: Vec<u64>,
    pub seed: u64,
    /// Per scene, `n_visual` feature vectors.
    #[serde(skip)]
    pub features: Vec<Vec<Vec<f32>>>,
    /// Orthonormal codes: objectness, background, one per class, one per
    /// attribute.
    #[serde(skip)]
    pub codes: Vec<Vec<f32>>,
}

fn orthonormal_codes(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian() as f64).collect();
        for b in &out {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out.into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

impl World {
    pub fn objectness_code(&self) -> &[f32] {
        &self.codes[0]
    }

    pub fn class_code(&self, class: usize) -> &[f32] {
        &self.codes[2 + class]
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Builds a world deterministically from `config`.
    pub fn generate(config: &WorldConfig) -> Result<World> {
        config.validate()?;
        let c = config;
        let root = Rng::new(c.seed);
        let dim = c.feature_dim();
        let codes = orthonormal_codes(c.n_codes(), dim, &mut root.child(0));
        let weights: Vec<f64> = (0..c.n_classes)
            .map(|k| 1.0 / ((k + 1) as f64).powf(c.zipf_exponent))
            .collect();

        let mut scenes = Vec::with_capacity(c.n_scenes);
        let mut features = Vec::with_capacity(c.n_scenes);
        for id in 0..c.n_scenes {
            let scene_seed = root.child(1 + id as u64).next_u64();
            let mut rng = Rng::new(scene_seed);
            let n = c.min_objects + rng.below(c.max_objects - c.min_objects + 1);
            let mut classes: Vec<usize> = Vec::with_capacity(c.max_objects);
            let mut avail = weights.clone();
            for _ in 0..n {
                let total: f64 = avail.iter().sum();
                let mut u = rng.uniform() * total;
                let mut pick = avail.iter().rposition(|w| *w > 0.0).unwrap_or(0);
                for (k, w) in avail.iter().enumerate() {
                    if *w <= 0.0 {
                        continue;
                    }
                    if u < *w {
                        pick = k;
                        break;
                    }
                    u -= w;
                }
                avail[pick] = 0.0;
                classes.push(pick);
            }
            for b in &c.bias {
                let draw = rng.uniform();
                if classes.contains(&b.cue)
                    && !classes.contains(&b.target)
                    && classes.len() < c.max_objects
                    && draw < b.prob
                {
                    classes.push(b.target);
                }
            }
            let objects: Vec<SceneObject> = classes
                .iter()
                .map(|&class| SceneObject {
                    class,
                    attributes: if c.n_attributes > 0 {
                        vec![rng.below(c.n_attributes)]
                    } else {
                        Vec::new()
                    },
                })
                .collect();

            let mut slots: Vec<usize> = (0..c.n_visual).collect();
            rng.shuffle(&mut slots);
            let mut layout = vec![None; c.n_visual];
            for (o, chunk) in slots.chunks(c.tokens_per_object).take(objects.len()).enumerate() {
                for &s in chunk {
                    layout[s] = Some(o);
                }
            }
            let inv_sqrt2 = std::f32::consts::FRAC_1_SQRT_2;
            let feats: Vec<Vec<f32>> = layout
                .iter()
                .map(|slot| {
                    let mut f = vec![0.0f32; dim];
                    match slot {
                        Some(o) => {
                            let obj = &objects[*o];
                            for (i, x) in f.iter_mut().enumerate() {
                                *x = inv_sqrt2 * (codes[0][i] + codes[2 + obj.class][i]);
                                for &a in &obj.attributes {
                                    *x += c.attribute_scale * codes[2 + c.n_classes + a][i];
                                }
                            }
                        }
                        None => f.copy_from_slice(&codes[1]),
                    }
                    for x in f.iter_mut() {
                        *x += c.feature_noise * rng.gaussian();
                    }
                    f
                })
                .collect();
            scenes.push(SceneGraph {
                id,
                objects,
                layout,
                seed: scene_seed,
            });
            features.push(feats);
        }

        let mut cooccurrence = vec![vec![0u64; c.n_classes]; c.n_classes];
        let mut class_counts = vec![0u64; c.n_classes];
        for s in &scenes {
            let cls = s.classes();
            for &a in &cls {
                class_counts[a] += 1;
                for &b in &cls {
                    if a != b {
                        cooccurrence[a][b] += 1;
                    }
                }
            }
        }
        let ontology = (0..c.n_classes)
            .map(|k| {
                CLASS_NAMES
                    .get(k)
                    .map_or_else(|| format!("class{k}"), |s| s.to_string())
            })
            .collect();
        Ok(World {
            config: config.clone(),
            ontology,
            scenes,
            cooccurrence,
            class_counts,
            seed: c.seed,
            features,
            codes,
        })
    }

    pub fn probe_sequence(&self, scene: usize, class: usize) -> MultimodalSequence {
        MultimodalSequence::new(self.features[scene].clone(), self.vocab().probe_prompt(class))
    }

    pub fn caption_sequence(&self, scene: usize) -> MultimodalSequence {
        MultimodalSequence::new(self.features[scene].clone(), self.vocab().caption_prompt())
    }

    /// Writes the world JSON and its feature envelope.
    pub fn save(&self, json_path: &Path, features_path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(json_path)?);
        serde_json::to_writer_pretty(f, self)?;
        let c = &self.config;
        let dim = c.feature_dim();
        let flat: Vec<f32> = self.features.iter().flatten().flatten().copied().collect();
        let features = Tensor::new(vec![self.scenes.len(), c.n_visual, dim], flat)?;
        let codes = Tensor::new(
            vec![self.codes.len(), dim],
            self.codes.iter().flatten().copied().collect(),
        )?;
        let header = serde_json::json!({"kind": "world-features", "seed": self.seed});
        write_envelope(
            BufWriter::new(File::create(features_path)?),
            &header,
            &[("features".to_string(), &features), ("codes".to_string(), &codes)],
        )
    }

    pub fn load(json_path: &Path, features_path: &Path) -> Result<World> {
        let open = |p: &Path| File::open(p).map_err(|e| Error::MissingArtifact(format!("{}: {e}", p.display())));
        let mut world: World = serde_json::from_reader(BufReader::new(open(json_path)?))
            .map_err(|e| Error::Format(format!("bad world file: {e}")))?;
        world.config.validate()?;
        let env = read_envelope(BufReader::new(open(features_path)?))?;
        if env.config.get("kind").and_then(|k| k.as_str()) != Some("world-features") {
            return Err(Error::Format("not a world feature file".into()));
        }
        let c = &world.config;
        let dim = c.feature_dim();
        let find = |name: &str| {
            env.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let features = find("features")?;
        if features.shape() != [world.scenes.len(), c.n_visual, dim] {
            return Err(Error::Format(format!(
                "feature tensor shape {:?} does not match the world",
                features.shape()
            )));
        }
        let codes = find("codes")?;
        if codes.shape() != [c.n_codes(), dim] {
            return Err(Error::Format("code tensor shape does not match the world".into()));
        }
        world.features = features
            .data()
            .chunks(c.n_visual * dim)
            .map(|scene| scene.chunks(dim).map(<[f32]>::to_vec).collect())
            .collect();
        world.codes = codes.data().chunks(dim).map(<[f32]>::to_vec).collect();
        Ok(world)
    }

    /// Short human-readable statistics.
    pub fn summary(&self) -> String {
        let n = self.scenes.len();
        let objects: usize = self.scenes.iter().map(|s| s.objects.len()).sum();
        let mut out = format!(
            "{} scenes, {} classes, {:.2} objects per scene\n",
            n,
            self.n_classes(),
            objects as f64 / n as f64
        );
        for (k, name) in self.ontology.iter().enumerate() {
            out.push_str(&format!("  {name:<10} in {:>4} scenes\n", self.class_counts[k]));
        }
        out
    }
}
