// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation grid over methods, strategies, probe kinds and captioning,
//! plus one-at-a-time hyperparameter sweeps and method comparisons.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{chair_scores, planted_accuracy, pope_scores, EvalRecord, TaskKind};
use super::probes::{build_probes, ProbeKind};
use super::vocab::EOS;
use super::world::World;
use crate::decoder::{generate, CutoffRule, DecodeConfig, Method, Strategy};
use crate::error::{Error, Result};
use crate::model::Weights;
use crate::numerics::Rng;
use crate::profiler::HeadFrequencyMap;
use crate::steering::{HeadSet, KappaVis, SteeringSpec};

/// A decoding method in the evaluation grid, including ablation controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MethodSpec {
    Original,
    /// Steering with the profiled text-centric heads.
    Ascd,
    Vcd {
        sigma: f32,
        alpha: f32,
        beta: f32,
    },
    /// `prefix` defaults to the vocabulary's confuser tokens.
    Icd {
        #[serde(default)]
        prefix: Option<Vec<u32>>,
        alpha: f32,
        beta: f32,
    },
    /// Positive heads drawn at random with the profiled set's size.
    RandomHeads,
    /// Positive steering on every head.
    AllHeads,
    /// Profiled heads, but critical tokens drawn at random per sample.
    RandomCritical,
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Original => "original",
            MethodSpec::Ascd => "ascd",
            MethodSpec::Vcd { .. } => "vcd",
            MethodSpec::Icd { .. } => "icd",
            MethodSpec::RandomHeads => "random-heads",
            MethodSpec::AllHeads => "all-heads",
            MethodSpec::RandomCritical => "random-critical",
        }
    }

    /// Parses a bare method name with default contrast knobs.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "original" => MethodSpec::Original,
            "ascd" => MethodSpec::Ascd,
            "vcd" => MethodSpec::Vcd {
                sigma: 1.0,
                alpha: 1.0,
                beta: 0.1,
            },
            "icd" => MethodSpec::Icd {
                prefix: None,
                alpha: 1.0,
                beta: 0.1,
            },
            "random-heads" => MethodSpec::RandomHeads,
            "all-heads" => MethodSpec::AllHeads,
            "random-critical" => MethodSpec::RandomCritical,
            other => return Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        })
    }

    /// Methods that read the profiled head set.
    pub fn needs_profile(&self) -> bool {
        matches!(
            self,
            MethodSpec::Ascd | MethodSpec::RandomHeads | MethodSpec::RandomCritical
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub methods: Vec<MethodSpec>,
    pub strategies: Vec<Strategy>,
    /// Knobs shared by every steered method; `heads_pos` is filled from
    /// the profile.
    pub steering: SteeringSpec,
    pub cutoff: CutoffRule,
    pub caption_max_tokens: usize,
    pub probes: bool,
    pub captions: bool,
    /// Seeds probe construction, ablation draws, noise and sampling.
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            methods: vec![MethodSpec::Original, MethodSpec::Ascd],
            strategies: vec![Strategy::Greedy],
            steering: SteeringSpec::default(),
            cutoff: CutoffRule::Fused,
            caption_max_tokens: 6,
            probes: true,
            captions: true,
            seed: 0,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.strategies.is_empty() {
            return Err(Error::InvalidConfig("methods and strategies must be nonempty".into()));
        }
        if !self.probes && !self.captions {
            return Err(Error::InvalidConfig("enable probes or captions".into()));
        }
        if self.caption_max_tokens == 0 {
            return Err(Error::InvalidConfig("caption_max_tokens must be >= 1".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        Ok(())
    }
}

/// Metrics of one (method, strategy, task kind) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub strategy: String,
    pub kind: TaskKind,
    pub metrics: BTreeMap<String, Option<f64>>,
}

/// Headline numbers of one (method, strategy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub strategy: String,
    pub pope_accuracy: Option<f64>,
    pub pope_f1: Option<f64>,
    pub planted_accuracy: Option<f64>,
    pub chair_s: Option<f64>,
    pub chair_i: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<EvalSummary>,
    pub records: Vec<EvalRecord>,
    pub seed: u64,
}

enum Job {
    Probe {
        scene: usize,
        kind: ProbeKind,
        class: usize,
        expected: bool,
        planted: bool,
    },
    Caption {
        scene: usize,
    },
}

impl Job {
    fn scene(&self) -> usize {
        match self {
            Job::Probe { scene, .. } | Job::Caption { scene } => *scene,
        }
    }
}

/// Draws `k` distinct heads uniformly.
pub fn random_heads(n_layers: usize, n_heads: usize, k: usize, rng: &mut Rng) -> Result<HeadSet> {
    let cells = n_layers * n_heads;
    if k > cells {
        return Err(Error::OutOfRange {
            what: "head count",
            value: k,
            limit: cells,
        });
    }
    HeadSet::from_pairs(
        rng.choose_distinct(cells, k)
            .into_iter()
            .map(|i| (i / n_heads, i % n_heads)),
    )
}

struct Resolved<'a> {
    spec: &'a MethodSpec,
    heads: Option<HeadSet>,
    stream: u64,
}

fn resolve_heads(
    spec: &MethodSpec,
    weights: &Weights,
    profile: Option<&HeadSet>,
    seed: u64,
) -> Result<Option<HeadSet>> {
    let c = &weights.config;
    let need = || {
        profile
            .cloned()
            .ok_or_else(|| Error::MissingArtifact(format!("method {} needs a head profile", spec.name())))
    };
    Ok(match spec {
        MethodSpec::Ascd | MethodSpec::RandomCritical => Some(need()?),
        MethodSpec::RandomHeads => {
            let k = need()?.len();
            Some(random_heads(
                c.n_layers,
                c.n_heads,
                k,
                &mut Rng::new(seed).child(0x4845_4144),
            )?)
        }
        MethodSpec::AllHeads => Some(HeadSet::all(c.n_layers, c.n_heads)),
        _ => None,
    })
}

fn decoder_method(
    r: &Resolved<'_>,
    world: &World,
    steering: &SteeringSpec,
    n_visual: usize,
    rng: &mut Rng,
) -> Result<Method> {
    let steered = |heads: &HeadSet, critical: Option<Vec<usize>>| Method::Ascd {
        spec: SteeringSpec {
            heads_pos: heads.clone(),
            ..steering.clone()
        },
        critical_tokens: critical,
    };
    Ok(match r.spec {
        MethodSpec::Original => Method::Original,
        MethodSpec::Ascd | MethodSpec::RandomHeads | MethodSpec::AllHeads => {
            steered(r.heads.as_ref().expect("resolved"), None)
        }
        MethodSpec::RandomCritical => {
            let k = steering.kappa_vis.resolve(n_visual)?;
            let mut tokens = rng.choose_distinct(n_visual, k);
            tokens.sort_unstable();
            steered(r.heads.as_ref().expect("resolved"), Some(tokens))
        }
        MethodSpec::Vcd { sigma, alpha, beta } => Method::Vcd {
            sigma: *sigma,
            alpha: *alpha,
            beta: *beta,
            seed: rng.next_u64(),
        },
        MethodSpec::Icd { prefix, alpha, beta } => Method::Icd {
            prefix: prefix.clone().unwrap_or_else(|| world.vocab().confuser_prefix()),
            alpha: *alpha,
            beta: *beta,
        },
    })
}

fn seeded_strategy(s: &Strategy, rng: &mut Rng) -> Strategy {
    match s {
        Strategy::Nucleus { top_p, temperature, .. } => Strategy::Nucleus {
            top_p: *top_p,
            temperature: *temperature,
            seed: rng.next_u64(),
        },
        other => other.clone(),
    }
}

/// Runs every method and strategy over the probe set and the captioning
/// task. `profile` holds the text-centric heads for steered methods.
pub fn run_eval(weights: &Weights, world: &World, profile: Option<&HeadSet>, spec: &EvalSpec) -> Result<EvalOutput> {
    spec.validate()?;
    let mut jobs = Vec::new();
    if spec.probes {
        for p in build_probes(world, spec.seed) {
            jobs.push(Job::Probe {
                scene: p.scene,
                kind: p.kind,
                class: p.class,
                expected: p.expected,
                planted: p.planted,
            });
        }
    }
    if spec.captions {
        jobs.extend((0..world.scenes.len()).map(|scene| Job::Caption { scene }));
    }
    let mut resolved = Vec::new();
    for (i, m) in spec.methods.iter().enumerate() {
        resolved.push(Resolved {
            spec: m,
            heads: resolve_heads(m, weights, profile, spec.seed)?,
            stream: i as u64,
        });
    }
    let root = Rng::new(spec.seed).child(0x4556_414c);
    let n_visual = weights.config.n_visual;

    let mut cells = Vec::new();
    for r in &resolved {
        for (si, s) in spec.strategies.iter().enumerate() {
            for (ji, job) in jobs.iter().enumerate() {
                cells.push((r, si, s, ji, job));
            }
        }
    }
    let records: Vec<EvalRecord> = cells
        .par_iter()
        .map(|(r, si, s, ji, job)| {
            let mut rng = root.child(r.stream).child(*si as u64).child(*ji as u64);
            let method = decoder_method(r, world, &spec.steering, n_visual, &mut rng)?;
            let strategy = seeded_strategy(s, &mut rng);
            let (seq, max_new) = match job {
                Job::Probe { scene, class, .. } => (world.probe_sequence(*scene, *class), 1),
                Job::Caption { scene } => (world.caption_sequence(*scene), spec.caption_max_tokens),
            };
            let cfg = DecodeConfig {
                strategy,
                max_new_tokens: max_new,
                stop_tokens: vec![EOS],
                method,
                cutoff: spec.cutoff,
                trace: true,
            };
            let (tokens, divergence, error) = match generate(weights, &seq, &cfg) {
                Ok(g) => {
                    let div = (!g.traces.is_empty() && g.traces[0].neg.is_some())
                        .then(|| g.traces.iter().map(|t| t.divergence()).sum::<f64>() / g.traces.len() as f64);
                    (g.tokens, div, None)
                }
                Err(Error::EmptyAfterTruncation) => {
                    warn!(
                        "{} / {}: scene {} emptied the truncated support",
                        r.spec.name(),
                        s.name(),
                        job.scene()
                    );
                    (Vec::new(), None, Some(Error::EmptyAfterTruncation.to_string()))
                }
                Err(e) => return Err(e),
            };
            let mut rec = match job {
                Job::Probe {
                    scene,
                    kind,
                    class,
                    expected,
                    planted,
                } => EvalRecord::probe(
                    world,
                    *scene,
                    *kind,
                    *class,
                    *expected,
                    *planted,
                    r.spec.name(),
                    s.name(),
                    tokens,
                    error,
                ),
                Job::Caption { scene } => EvalRecord::caption(world, *scene, r.spec.name(), s.name(), tokens, error),
            };
            rec.divergence = divergence;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let (rows, summary) = score_records(&records)?;
    Ok(EvalOutput {
        rows,
        summary,
        records,
        seed: spec.seed,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores records grouped by (method, strategy), in first-seen order.
pub fn score_records(records: &[EvalRecord]) -> Result<(Vec<EvalRow>, Vec<EvalSummary>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.method.clone(), r.strategy.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.clone());
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for key in order {
        let recs = &groups[&key];
        let has_probes = recs.iter().any(|r| r.kind != TaskKind::Caption);
        let has_captions = recs.iter().any(|r| r.kind == TaskKind::Caption);
        let pope = has_probes.then(|| pope_scores(recs)).transpose()?;
        let chair = has_captions.then(|| chair_scores(recs)).transpose()?;
        for kind in TaskKind::ALL {
            let of_kind: Vec<&EvalRecord> = recs.iter().filter(|r| r.kind == kind).collect();
            if of_kind.is_empty() {
                continue;
            }
            let mut metrics = BTreeMap::new();
            if let Some(pk) = kind.probe() {
                let m = pope.as_ref().expect("probes present").per_kind[&pk];
                metrics.insert("accuracy".into(), Some(m.accuracy));
                metrics.insert("precision".into(), Some(m.precision));
                metrics.insert("recall".into(), Some(m.recall));
                metrics.insert("f1".into(), Some(m.f1));
                let owned: Vec<EvalRecord> = of_kind.iter().map(|r| (*r).clone()).collect();
                if let Some(p) = planted_accuracy(&owned) {
                    metrics.insert("planted_accuracy".into(), Some(p));
                }
            } else {
                let c = chair.expect("captions present");
                metrics.insert("chair_s".into(), Some(c.chair_s));
                metrics.insert("chair_i".into(), c.chair_i);
            }
            metrics.insert("divergence".into(), mean(of_kind.iter().filter_map(|r| r.divergence)));
            metrics.insert(
                "failures".into(),
                Some(of_kind.iter().filter(|r| r.error.is_some()).count() as f64),
            );
            rows.push(EvalRow {
                method: key.0.clone(),
                strategy: key.1.clone(),
                kind,
                metrics,
            });
        }
        summary.push(EvalSummary {
            method: key.0.clone(),
            strategy: key.1.clone(),
            pope_accuracy: pope.as_ref().map(|p| p.mean.accuracy),
            pope_f1: pope.as_ref().map(|p| p.mean.f1),
            planted_accuracy: planted_accuracy(recs),
            chair_s: chair.map(|c| c.chair_s),
            chair_i: chair.and_then(|c| c.chair_i),
            failures: recs.iter().filter(|r| r.error.is_some()).count(),
        });
    }
    Ok((rows, summary))
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Long-format CSV: `method,strategy,metric,kind,value,seed`. POPE means
/// use kind `mean`; undefined values are empty.
pub fn write_results_csv<W: Write>(mut w: W, out: &EvalOutput) -> Result<()> {
    writeln!(w, "method,strategy,metric,kind,value,seed")?;
    for r in &out.rows {
        for (metric, v) in &r.metrics {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.method,
                r.strategy,
                metric,
                r.kind.name(),
                fmt_value(*v),
                out.seed
            )?;
        }
    }
    for s in &out.summary {
        for (metric, v) in [("accuracy", s.pope_accuracy), ("f1", s.pope_f1)] {
            if v.is_some() {
                writeln!(
                    w,
                    "{},{},{},mean,{},{}",
                    s.method,
                    s.strategy,
                    metric,
                    fmt_value(v),
                    out.seed
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_jsonl<W: Write>(mut w: W, records: &[EvalRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(r: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("record line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Recomputes the result tables from persisted records.
pub fn rescore(records: Vec<EvalRecord>, seed: u64) -> Result<EvalOutput> {
    let (rows, summary) = score_records(&records)?;
    Ok(EvalOutput {
        rows,
        summary,
        records,
        seed,
    })
}

/// Values tried for each knob; empty lists are skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub alpha_pos: Vec<f32>,
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub kappa_tch: Vec<usize>,
    pub kappa_vis: Vec<KappaVis>,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.alpha_pos.len() + self.alpha.len() + self.beta.len() + self.kappa_tch.len() + self.kappa_vis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub parameter: String,
    pub value: String,
    pub output: EvalOutput,
}

/// Varies one knob at a time around `base`. `kappa_tch` settings reselect
/// heads from `profile`, others reuse `heads`.
pub fn sweep(
    weights: &Weights,
    world: &World,
    heads: Option<&HeadSet>,
    profile: Option<&HeadFrequencyMap>,
    base: &EvalSpec,
    grid: &SweepGrid,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let mut points = Vec::new();
    let mut run = |parameter: &str, value: String, spec: EvalSpec, heads: Option<&HeadSet>| -> Result<()> {
        let output = run_eval(weights, world, heads, &spec)?;
        points.push(SweepPoint {
            parameter: parameter.into(),
            value,
            output,
        });
        Ok(())
    };
    let with = |f: &dyn Fn(&mut SteeringSpec)| {
        let mut s = base.clone();
        f(&mut s.steering);
        s
    };
    for &v in &grid.alpha_pos {
        run("alpha_pos", v.to_string(), with(&|s| s.alpha_pos = v), heads)?;
    }
    for &v in &grid.alpha {
        run("alpha", v.to_string(), with(&|s| s.alpha = v), heads)?;
    }
    for &v in &grid.beta {
        run("beta", v.to_string(), with(&|s| s.beta = v), heads)?;
    }
    for &k in &grid.kappa_tch {
        let map = profile.ok_or_else(|| Error::MissingArtifact("kappa_tch sweep needs a head profile".into()))?;
        let cells = map.n_layers() * map.n_heads();
        let selected = map.select_text_centric(k.min(cells))?;
        run("kappa_tch", k.to_string(), base.clone(), Some(&selected))?;
    }
    for &v in &grid.kappa_vis {
        let label = match v {
            KappaVis::Fraction(f) => f.to_string(),
            KappaVis::Count(c) => format!("{c}#"),
        };
        run("kappa_vis", label, with(&|s| s.kappa_vis = v), heads)?;
    }
    Ok(points)
}

/// Long-format CSV: `parameter,setting,method,strategy,metric,kind,value,seed`.
pub fn write_sweep_csv<W: Write>(mut w: W, points: &[SweepPoint]) -> Result<()> {
    writeln!(w, "parameter,setting,method,strategy,metric,kind,value,seed")?;
    for p in points {
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &p.output)?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        for line in text.lines().skip(1) {
            writeln!(w, "{},{},{line}", p.parameter, p.value)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub method: String,
    pub strategy: String,
    pub kind: TaskKind,
    pub metric: String,
    pub value: Option<f64>,
    pub reference: Option<f64>,
    pub delta: Option<f64>,
}

/// Differences of every row against the `reference` method's row with the
/// same strategy, kind and metric.
pub fn compare(rows: &[EvalRow], reference: &str) -> Result<Vec<DeltaRow>> {
    if !rows.iter().any(|r| r.method == reference) {
        return Err(Error::InvalidConfig(format!(
            "no rows for reference method {reference:?}"
        )));
    }
    let mut out = Vec::new();
    for r in rows {
        let base = rows
            .iter()
            .find(|b| b.method == reference && b.strategy == r.strategy && b.kind == r.kind);
        for (metric, v) in &r.metrics {
            let reference = base.and_then(|b| b.metrics.get(metric).copied().flatten());
            out.push(DeltaRow {
                method: r.method.clone(),
                strategy: r.strategy.clone(),
                kind: r.kind,
                metric: metric.clone(),
                value: *v,
                reference,
                delta: v.zip(reference).map(|(a, b)| a - b),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::prior::{build_prior_model, PriorGains};
    use crate::synth::world::WorldConfig;

    fn setup() -> (World, Weights) {
        let world = World::generate(&WorldConfig {
            n_scenes: 6,
            ..WorldConfig::default()
        })
        .unwrap();
        let w = build_prior_model(&world, &PriorGains::default()).unwrap();
        (world, w)
    }

    #[test]
    fn table_shape_and_determinism() {
        let (world, w) = setup();
        let heads = HeadSet::from_pairs([(0, 0), (0, 1)]).unwrap();
        let spec = EvalSpec {
            methods: vec![MethodSpec::Original, MethodSpec::Ascd, MethodSpec::RandomHeads],
            strategies: vec![Strategy::Greedy, Strategy::Beam { width: 2 }],
            ..EvalSpec::default()
        };
        let a = run_eval(&w, &world, Some(&heads), &spec).unwrap();
        assert_eq!(a.rows.len(), 3 * 2 * 4);
        let b = run_eval(&w, &world, Some(&heads), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn steered_methods_need_a_profile() {
        let (world, w) = setup();
        let err = run_eval(&w, &world, None, &EvalSpec::default()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        let spec = EvalSpec {
            methods: vec![MethodSpec::Original, MethodSpec::AllHeads],
            ..EvalSpec::default()
        };
        assert!(run_eval(&w, &world, None, &spec).is_ok());
    }

    #[test]
    fn random_heads_are_reproducible() {
        let a = random_heads(2, 4, 3, &mut Rng::new(5)).unwrap();
        assert_eq!(a, random_heads(2, 4, 3, &mut Rng::new(5)).unwrap());
        assert_eq!(a.len(), 3);
        assert!(random_heads(2, 4, 9, &mut Rng::new(5)).is_err());
    }

    #[test]
    fn rescoring_persisted_records_is_idempotent() {
        let (world, w) = setup();
        let spec = EvalSpec {
            methods: vec![MethodSpec::Original],
            ..EvalSpec::default()
        };
        let out = run_eval(&w, &world, None, &spec).unwrap();
        let mut buf = Vec::new();
        write_records_jsonl(&mut buf, &out.records).unwrap();
        let again = rescore(read_records_jsonl(&buf[..]).unwrap(), out.seed).unwrap();
        assert_eq!(again, out);
        let (mut c1, mut c2) = (Vec::new(), Vec::new());
        write_results_csv(&mut c1, &out).unwrap();
        write_results_csv(&mut c2, &again).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn compare_against_itself_is_zero() {
        let (world, w) = setup();
        let spec = EvalSpec {
            methods: vec![MethodSpec::Original],
            ..EvalSpec::default()
        };
        let out = run_eval(&w, &world, None, &spec).unwrap();
        for d in compare(&out.rows, "original").unwrap() {
            assert!(d.delta.is_none_or(|x| x == 0.0));
        }
        assert!(compare(&out.rows, "ascd").is_err());
    }

    #[test]
    fn sweep_shapes() {
        let (world, w) = setup();
        let heads = HeadSet::all(1, 4);
        let base = EvalSpec {
            methods: vec![MethodSpec::Ascd],
            captions: false,
            ..EvalSpec::default()
        };
        let grid = SweepGrid {
            alpha: vec![0.5, 1.0],
            ..SweepGrid::default()
        };
        let points = sweep(&w, &world, Some(&heads), None, &base, &grid).unwrap();
        assert_eq!(points.len(), 2);
        let single = SweepGrid {
            alpha: vec![base.steering.alpha],
            ..SweepGrid::default()
        };
        let one = sweep(&w, &world, Some(&heads), None, &base, &single).unwrap();
        assert_eq!(one[0].output, run_eval(&w, &world, Some(&heads), &base).unwrap());
        assert!(sweep(&w, &world, Some(&heads), None, &base, &SweepGrid::default()).is_err());
    }

    #[test]
    fn zero_positive_strength_matches_unsteered_positive_branch() {
        let (world, w) = setup();
        let heads = HeadSet::all(1, 4);
        let base = EvalSpec {
            methods: vec![MethodSpec::Ascd],
            captions: false,
            ..EvalSpec::default()
        };
        let zero = sweep(
            &w,
            &world,
            Some(&heads),
            None,
            &base,
            &SweepGrid {
                alpha_pos: vec![0.0],
                ..SweepGrid::default()
            },
        )
        .unwrap();
        let empty_heads = run_eval(&w, &world, Some(&HeadSet::new()), &base).unwrap();
        assert_eq!(zero[0].output.records, empty_heads.records);
    }
}
