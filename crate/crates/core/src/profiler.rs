// SPDX-License-Identifier: MIT OR Apache-2.0

//! Offline text-centric head identification by voting, head-distribution
//! divergence, and attention-redistribution measurement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_mass, AttentionRecord, KvCache, Modality, MultimodalSequence, TokenInput, Weights};
use crate::numerics::{argmax, top_k_indices, Rng, NORM_TOL};
use crate::steering::HeadSet;

/// Text-to-visual attention ratio per `(layer, head)`, layer-major.
///
/// A head with zero visual mass gets `f64::INFINITY`, which sorts above
/// every finite ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioMatrix {
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f64>,
}

impl RatioMatrix {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }
}

/// Sums text and visual mass per head over every record, then divides.
///
/// `modality_mask` must cover the longest key row; records may come from
/// several query positions of one generation.
pub fn attention_ratio(
    records: &[AttentionRecord],
    modality_mask: &[Modality],
    n_layers: usize,
    n_heads: usize,
) -> Result<RatioMatrix> {
    let cells = n_layers * n_heads;
    let mut text = vec![0.0f64; cells];
    let mut vis = vec![0.0f64; cells];
    let mut seen = vec![false; cells];
    for r in records {
        if r.layer >= n_layers || r.head >= n_heads {
            return Err(Error::ShapeMismatch(format!(
                "record for ({}, {}) outside {n_layers}x{n_heads}",
                r.layer, r.head
            )));
        }
        if r.post_norm_weights.len() > modality_mask.len() {
            return Err(Error::ShapeMismatch("modality mask shorter than attention row".into()));
        }
        let i = r.layer * n_heads + r.head;
        seen[i] = true;
        for (w, m) in r.post_norm_weights.iter().zip(modality_mask) {
            match m {
                Modality::Visual => vis[i] += *w as f64,
                Modality::Text => text[i] += *w as f64,
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::ShapeMismatch(format!(
            "no records for head ({}, {})",
            i / n_heads,
            i % n_heads
        )));
    }
    let values = text
        .iter()
        .zip(&vis)
        .map(|(&t, &v)| if v > 0.0 { t / v } else { f64::INFINITY })
        .collect();
    Ok(RatioMatrix {
        n_layers,
        n_heads,
        values,
    })
}

/// Vote counts per `(layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFrequencyMap {
    n_layers: usize,
    n_heads: usize,
    vote_k: usize,
    n_samples: u64,
    counts: Vec<u64>,
}

impl HeadFrequencyMap {
    /// Empty map; `vote_k` is clamped to the number of heads.
    pub fn new(n_layers: usize, n_heads: usize, vote_k: usize) -> Result<Self> {
        let cells = n_layers * n_heads;
        if cells == 0 || vote_k == 0 {
            return Err(Error::InvalidConfig("head grid and vote_k must be nonempty".into()));
        }
        if vote_k > cells {
            log::debug!("vote_k {vote_k} clamped to {cells} heads");
        }
        Ok(Self {
            n_layers,
            n_heads,
            vote_k: vote_k.min(cells),
            n_samples: 0,
            counts: vec![0; cells],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn vote_k(&self) -> usize {
        self.vote_k
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, layer: usize, head: usize) -> u64 {
        self.counts[layer * self.n_heads + head]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one vote to each of the `vote_k` highest-ratio heads.
    pub fn accumulate(&mut self, ratio: &RatioMatrix) -> Result<()> {
        if ratio.n_layers != self.n_layers || ratio.n_heads != self.n_heads {
            return Err(Error::ShapeMismatch(format!(
                "ratio {}x{} vs map {}x{}",
                ratio.n_layers, ratio.n_heads, self.n_layers, self.n_heads
            )));
        }
        if ratio.values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("attention ratio"));
        }
        for i in top_k_indices(&ratio.values, self.vote_k)? {
            self.counts[i] += 1;
        }
        self.n_samples += 1;
        Ok(())
    }

    /// Element-wise sum with another map of the same shape and `vote_k`.
    pub fn merge(&mut self, other: &HeadFrequencyMap) -> Result<()> {
        if (other.n_layers, other.n_heads, other.vote_k) != (self.n_layers, self.n_heads, self.vote_k) {
            return Err(Error::ShapeMismatch("cannot merge unlike frequency maps".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    /// Counts normalized to a distribution over heads.
    pub fn distribution(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyInput("frequency map has no votes"));
        }
        Ok(self.counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// The `kappa_tch` most-voted heads, ties to `(layer, head)` ascending.
    pub fn select_text_centric(&self, kappa_tch: usize) -> Result<HeadSet> {
        if kappa_tch == 0 {
            return Ok(HeadSet::new());
        }
        let idx = top_k_indices(&self.counts, kappa_tch)?;
        HeadSet::from_pairs(idx.into_iter().map(|i| (i / self.n_heads, i % self.n_heads)))
    }

    /// JSON artifact with the selection made from this map.
    pub fn to_artifact(&self, selected: HeadSet) -> ProfileArtifact {
        ProfileArtifact {
            config: ProfileHeader {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                vote_k: self.vote_k,
                n_samples: self.n_samples,
            },
            counts: self.counts.chunks(self.n_heads).map(<[u64]>::to_vec).collect(),
            selected,
        }
    }

    /// CSV heatmap: `layer,head,count,frequency`.
    pub fn heatmap_csv(&self) -> String {
        let total = self.total().max(1) as f64;
        let mut out = String::from("layer,head,count,frequency\n");
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i / self.n_heads,
                i % self.n_heads,
                c,
                c as f64 / total
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileHeader {
    pub n_layers: usize,
    pub n_heads: usize,
    pub vote_k: usize,
    pub n_samples: u64,
}

/// Serialized profiling result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileArtifact {
    pub config: ProfileHeader,
    pub counts: Vec<Vec<u64>>,
    pub selected: HeadSet,
}

impl ProfileArtifact {
    pub fn frequency_map(&self) -> Result<HeadFrequencyMap> {
        let c = &self.config;
        let mut map = HeadFrequencyMap::new(c.n_layers, c.n_heads, c.vote_k)?;
        if self.counts.len() != c.n_layers || self.counts.iter().any(|r| r.len() != c.n_heads) {
            return Err(Error::Format("counts do not match the header shape".into()));
        }
        map.counts = self.counts.concat();
        map.n_samples = c.n_samples;
        if map.total() != map.n_samples * map.vote_k as u64 {
            return Err(Error::Format("vote total disagrees with n_samples * vote_k".into()));
        }
        Ok(map)
    }
}

/// Jensen–Shannon divergence in nats between two distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} cells", p.len(), q.len())));
    }
    for d in [p, q] {
        if let Some((index, &v)) = d.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
            return Err(Error::NegativeProbability { index, value: v });
        }
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized(sum));
        }
    }
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / m).ln();
        }
        if b > 0.0 {
            kl_q += b * (b / m).ln();
        }
    }
    Ok((0.5 * kl_p + 0.5 * kl_q).clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub vote_k: usize,
    pub max_new_tokens: usize,
    pub stop_tokens: Vec<u32>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            vote_k: 32,
            max_new_tokens: 4,
            stop_tokens: Vec::new(),
        }
    }
}

/// Greedy unsteered generation returning the attention records of every
/// query position that emitted a token, and the full modality mask.
pub fn generation_records(
    weights: &Weights,
    seq: &MultimodalSequence,
    max_new_tokens: usize,
    stop_tokens: &[u32],
) -> Result<(Vec<Vec<AttentionRecord>>, Vec<Modality>)> {
    if max_new_tokens == 0 {
        return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
    }
    let (mut cache, mut out) = weights.prefill(seq)?;
    let mut steps = Vec::with_capacity(max_new_tokens);
    for i in 0..max_new_tokens {
        let token = argmax(&out.logits).ok_or(Error::EmptyInput("logits"))? as u32;
        steps.push(std::mem::take(&mut out.records));
        if stop_tokens.contains(&token) || i + 1 == max_new_tokens {
            break;
        }
        if cache.len() >= weights.config.max_seq {
            break;
        }
        out = weights.decode_step(&mut cache, &TokenInput::Text(token), None)?;
    }
    Ok((steps, full_mask(&cache)))
}

fn full_mask(cache: &KvCache) -> Vec<Modality> {
    cache.modality_mask().to_vec()
}

/// Ratio matrix of one sample's generation.
pub fn sample_ratio(weights: &Weights, seq: &MultimodalSequence, config: &ProfileConfig) -> Result<RatioMatrix> {
    let (steps, mask) = generation_records(weights, seq, config.max_new_tokens, &config.stop_tokens)?;
    let records: Vec<AttentionRecord> = steps.into_iter().flatten().collect();
    attention_ratio(&records, &mask, weights.config.n_layers, weights.config.n_heads)
}

/// Votes over a reference set; samples are processed in parallel.
pub fn profile_heads(
    weights: &Weights,
    samples: &[MultimodalSequence],
    config: &ProfileConfig,
) -> Result<HeadFrequencyMap> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("reference set"));
    }
    let c = &weights.config;
    let empty = HeadFrequencyMap::new(c.n_layers, c.n_heads, config.vote_k)?;
    let ratios = samples
        .par_iter()
        .map(|s| sample_ratio(weights, s, config))
        .collect::<Result<Vec<_>>>()?;
    let mut map = empty;
    for r in &ratios {
        map.accumulate(r)?;
    }
    Ok(map)
}

/// Input transform applied to every sample before generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BranchTransform {
    None,
    /// Additive Gaussian noise of scale `sigma` on the visual features.
    FeatureNoise {
        sigma: f32,
    },
    /// Token ids inserted before the text prompt.
    NegativePrefix {
        ids: Vec<u32>,
    },
}

impl BranchTransform {
    pub fn apply(&self, seq: &MultimodalSequence, rng: &mut Rng) -> Result<MultimodalSequence> {
        match self {
            BranchTransform::None => Ok(seq.clone()),
            BranchTransform::FeatureNoise { sigma } => seq.with_feature_noise(*sigma, rng),
            BranchTransform::NegativePrefix { ids } => {
                if ids.is_empty() {
                    return Err(Error::InvalidConfig("negative prefix is empty".into()));
                }
                Ok(seq.with_text_prefix(ids))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionRow {
    pub transform: BranchTransform,
    pub vis_mass: f64,
    pub text_mass: f64,
}

/// Mean visual and text attention mass over generated positions and
/// samples, once per transform. Sample `i` draws its noise from stream `i`
/// of `seed`, so noise directions are shared across noise levels.
pub fn redistribution_report(
    weights: &Weights,
    dataset: &[MultimodalSequence],
    transforms: &[BranchTransform],
    max_new_tokens: usize,
    stop_tokens: &[u32],
    seed: u64,
) -> Result<Vec<RedistributionRow>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let root = Rng::new(seed);
    transforms
        .iter()
        .map(|t| {
            let per_sample = dataset
                .par_iter()
                .enumerate()
                .map(|(i, seq)| {
                    let mut rng = root.child(i as u64);
                    let seq = t.apply(seq, &mut rng)?;
                    let (steps, mask) = generation_records(weights, &seq, max_new_tokens, stop_tokens)?;
                    let (mut vis, mut text) = (0.0, 0.0);
                    for records in &steps {
                        let m = attention_mass(records, &mask)?;
                        vis += m.mean_vis;
                        text += m.mean_text;
                    }
                    let n = steps.len() as f64;
                    Ok((vis / n, text / n))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = per_sample.len() as f64;
            Ok(RedistributionRow {
                transform: t.clone(),
                vis_mass: per_sample.iter().map(|p| p.0).sum::<f64>() / n,
                text_mass: per_sample.iter().map(|p| p.1).sum::<f64>() / n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, InitMode, ModelConfig, PlantedSpec};
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn record(layer: usize, head: usize, w: Vec<f32>) -> AttentionRecord {
        AttentionRecord {
            layer,
            head,
            query_position: w.len() - 1,
            pre_norm_scores: w.clone(),
            edited_row: None,
            post_norm_weights: w,
        }
    }

    #[test]
    fn ratio_examples() {
        let mask = [Modality::Visual, Modality::Text, Modality::Text];
        let r = attention_ratio(&[record(0, 0, vec![0.3, 0.6, 0.1])], &mask, 1, 1).unwrap();
        assert!((r.get(0, 0) - 0.7 / 0.3).abs() < 1e-6);
        let r = attention_ratio(&[record(0, 0, vec![1.0, 0.0, 0.0])], &mask, 1, 1).unwrap();
        assert_eq!(r.get(0, 0), 0.0);
        let r = attention_ratio(&[record(0, 0, vec![0.0, 0.5, 0.5])], &mask, 1, 1).unwrap();
        assert_eq!(r.get(0, 0), f64::INFINITY);
        // uniform over V visual and 2V text keys
        let v = 3;
        let mut mask = vec![Modality::Visual; v];
        mask.extend(vec![Modality::Text; 2 * v]);
        let w = vec![1.0 / (3 * v) as f32; 3 * v];
        let r = attention_ratio(&[record(0, 0, w)], &mask, 1, 1).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn ratio_requires_every_head() {
        let mask = [Modality::Visual, Modality::Text];
        assert!(attention_ratio(&[record(0, 0, vec![0.5, 0.5])], &mask, 1, 2).is_err());
    }

    #[test]
    fn vote_examples() {
        let ratio = RatioMatrix {
            n_layers: 2,
            n_heads: 2,
            values: vec![5.0, 1.0, 3.0, 2.0],
        };
        let mut map = HeadFrequencyMap::new(2, 2, 2).unwrap();
        map.accumulate(&ratio).unwrap();
        assert_eq!(map.counts(), &[1, 0, 1, 0]);
        map.accumulate(&ratio).unwrap();
        assert_eq!(map.counts(), &[2, 0, 2, 0]);

        let mut all = HeadFrequencyMap::new(2, 2, 4).unwrap();
        all.accumulate(&ratio).unwrap();
        assert_eq!(all.counts(), &[1, 1, 1, 1]);
        assert_eq!(HeadFrequencyMap::new(2, 2, 32).unwrap().vote_k(), 4);
    }

    #[test]
    fn infinite_ratio_sorts_first() {
        let ratio = RatioMatrix {
            n_layers: 1,
            n_heads: 3,
            values: vec![5.0, f64::INFINITY, f64::INFINITY],
        };
        let mut map = HeadFrequencyMap::new(1, 3, 1).unwrap();
        map.accumulate(&ratio).unwrap();
        assert_eq!(map.counts(), &[0, 1, 0]);
    }

    #[test]
    fn selection_examples() {
        let mut map = HeadFrequencyMap::new(2, 2, 1).unwrap();
        map.counts = vec![1, 3, 1, 0];
        map.n_samples = 5;
        let one = map.select_text_centric(1).unwrap();
        assert!(one.contains(0, 1) && one.len() == 1);
        let two = map.select_text_centric(2).unwrap();
        assert!(two.contains(0, 1) && two.contains(0, 0));
        assert_eq!(map.select_text_centric(4).unwrap().len(), 4);
        assert!(map.select_text_centric(0).unwrap().is_empty());
        assert!(map.select_text_centric(5).is_err());
    }

    #[test]
    fn merge_and_artifact_round_trip() {
        let ratio = RatioMatrix {
            n_layers: 1,
            n_heads: 3,
            values: vec![1.0, 2.0, 3.0],
        };
        let mut a = HeadFrequencyMap::new(1, 3, 2).unwrap();
        a.accumulate(&ratio).unwrap();
        let mut b = a.clone();
        b.merge(&a).unwrap();
        assert_eq!(b.counts(), &[0, 2, 2]);
        assert_eq!(b.total(), b.n_samples() * 2);
        let art = b.to_artifact(b.select_text_centric(1).unwrap());
        let json = serde_json::to_string(&art).unwrap();
        let back: ProfileArtifact = serde_json::from_str(&json).unwrap();
        assert_eq!(back.frequency_map().unwrap(), b);
        assert!(b.heatmap_csv().starts_with("layer,head,count,frequency\n0,0,0,0\n"));
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let d = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        // m = [0.75, 0.25]; ½(0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25)) + ½(1 · ln(1/0.75))
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln()) + 0.5 * (1.0f64 / 0.75).ln();
        let d = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((d - oracle).abs() < 1e-12);
        assert!((d - 0.2157).abs() < 1e-4);
        assert!(js_divergence(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 6).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn jsd_is_symmetric_and_bounded(p in distribution(), q in distribution()) {
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
            prop_assert!(js_divergence(&p, &p).unwrap() < 1e-12);
        }

        #[test]
        fn selection_ignores_count_scale(counts in prop::collection::vec(0u64..20, 6), scale in 1u64..9, k in 1usize..=6) {
            let mut a = HeadFrequencyMap::new(2, 3, 1).unwrap();
            a.counts = counts.clone();
            let mut b = a.clone();
            b.counts = counts.iter().map(|c| c * scale).collect();
            prop_assert_eq!(a.select_text_centric(k).unwrap(), b.select_text_centric(k).unwrap());
        }

        #[test]
        fn vote_total_tracks_samples(rows in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 6), 1..8), k in 1usize..=6) {
            let mut map = HeadFrequencyMap::new(2, 3, k).unwrap();
            for values in rows {
                map.accumulate(&RatioMatrix { n_layers: 2, n_heads: 3, values }).unwrap();
                prop_assert_eq!(map.total(), map.n_samples() * k as u64);
            }
        }
    }

    #[test]
    fn planted_text_heads_are_recovered() {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 8,
            vocab_size: 10,
            n_visual: 4,
            max_seq: 12,
            normalize_visual: true,
        };
        let planted = [(0, 1), (1, 0)];
        let w = build_model(&config, &InitMode::Planted(PlantedSpec::text_heads(3, &planted))).unwrap();
        let mut rng = Rng::new(9);
        let samples: Vec<_> = (0..10)
            .map(|_| {
                let feats = (0..4).map(|_| (0..8).map(|_| rng.gaussian()).collect()).collect();
                MultimodalSequence::new(feats, vec![1, 2 + rng.below(8) as u32])
            })
            .collect();
        let cfg = ProfileConfig {
            vote_k: 2,
            max_new_tokens: 3,
            stop_tokens: vec![],
        };
        let map = profile_heads(&w, &samples, &cfg).unwrap();
        let got = map.select_text_centric(2).unwrap();
        assert_eq!(got, HeadSet::from_pairs(planted).unwrap());
    }

    #[test]
    fn redistribution_rows_partition_mass() {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 8,
            vocab_size: 10,
            n_visual: 3,
            max_seq: 12,
            normalize_visual: true,
        };
        let w = build_model(&config, &InitMode::SeededRandom { seed: 1 }).unwrap();
        let data = vec![MultimodalSequence::new(vec![vec![0.5; 8]; 3], vec![1, 2])];
        let transforms = [
            BranchTransform::None,
            BranchTransform::None,
            BranchTransform::FeatureNoise { sigma: 1.0 },
            BranchTransform::NegativePrefix { ids: vec![3, 4] },
        ];
        let rows = redistribution_report(&w, &data, &transforms, 2, &[], 0).unwrap();
        assert_eq!(rows[0], rows[1]);
        for r in &rows {
            assert!((r.vis_mass + r.text_mass - 1.0).abs() < 1e-6);
        }
        let bad = [BranchTransform::NegativePrefix { ids: vec![] }];
        assert!(redistribution_report(&w, &data, &bad, 2, &[], 0).is_err());
    }
}
