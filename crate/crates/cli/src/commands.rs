// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ascd_core::decoder::{generate, write_trace_jsonl, DecodeConfig, Method, Strategy};
use ascd_core::profiler::{profile_heads, HeadFrequencyMap, ProfileArtifact, ProfileConfig};
use ascd_core::steering::{HeadSet, SteeringSpec};
use ascd_core::synth::vocab::EOS;
use ascd_core::synth::{
    compare, read_records_jsonl, rescore, run_eval, sweep, write_records_jsonl, write_results_csv, write_sweep_csv,
    EvalOutput, MethodSpec, World,
};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, CliError, Command};

fn parse_strategy(name: &str, seed: u64) -> Result<Strategy, CliError> {
    match name {
        "greedy" => Ok(Strategy::Greedy),
        "nucleus" => Ok(Strategy::Nucleus {
            top_p: 0.9,
            temperature: 1.0,
            seed,
        }),
        "beam" => Ok(Strategy::Beam { width: 3 }),
        other => Err(CliError::usage(format!("unknown strategy {other:?}"))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if !g.strategy.is_empty() {
        let strategies = g
            .strategy
            .iter()
            .map(|s| parse_strategy(s, cfg.seed))
            .collect::<Result<Vec<_>, _>>()?;
        cfg.decode.strategy = strategies[0].clone();
        cfg.eval.strategies = strategies;
    }
    if !g.method.is_empty() {
        cfg.eval.methods = g
            .method
            .iter()
            .map(|m| MethodSpec::parse(m))
            .collect::<Result<Vec<_>, _>>()?;
        cfg.decode.method = g.method[0].clone();
    }
    cfg.resolve();
    let name = match &cli.command {
        Command::Worldgen => "worldgen",
        Command::Profile => "profile",
        Command::Decode { .. } => "decode",
        Command::Eval { .. } => "eval",
        Command::Sweep => "sweep",
        Command::Compare { .. } => "compare",
    };
    if name == "decode" && g.method.len() > 1 {
        return Err(CliError::usage("decode takes a single --method"));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(format!("effective_config.{name}.json")), &cfg)?;
    match cli.command {
        Command::Worldgen => cmd_worldgen(&cfg),
        Command::Profile => cmd_profile(&cfg),
        Command::Decode { scene, probe } => cmd_decode(&cfg, scene, probe, g.trace),
        Command::Eval { from_records } => cmd_eval(&cfg, from_records.as_deref()),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Compare { reference } => cmd_compare(&cfg, &reference),
    }
}

fn cmd_worldgen(cfg: &RunConfig) -> Result<(), CliError> {
    let world = cfg.world()?;
    world.save(&cfg.out_dir.join("world.json"), &cfg.out_dir.join("world.features"))?;
    print!("{}", world.summary());
    Ok(())
}

fn kappa_tch(cfg: &RunConfig, map: &HeadFrequencyMap) -> usize {
    cfg.profile.kappa_tch.min(map.n_layers() * map.n_heads())
}

fn cmd_profile(cfg: &RunConfig) -> Result<(), CliError> {
    let world = cfg.world()?;
    let weights = cfg.weights(&world)?;
    let n = cfg
        .profile
        .n_samples
        .unwrap_or(world.scenes.len())
        .min(world.scenes.len());
    let samples: Vec<_> = (0..n).map(|s| world.caption_sequence(s)).collect();
    let pcfg = ProfileConfig {
        vote_k: cfg.profile.vote_k,
        max_new_tokens: cfg.profile.max_new_tokens,
        stop_tokens: vec![EOS],
    };
    let map = profile_heads(&weights, &samples, &pcfg)?;
    let selected = map.select_text_centric(kappa_tch(cfg, &map))?;
    write_json(&cfg.out_dir.join("heads.json"), &selected)?;
    write_json(&cfg.out_dir.join("profile.json"), &map.to_artifact(selected.clone()))?;
    fs::write(cfg.out_dir.join("heatmap.csv"), map.heatmap_csv())?;
    info!("profiled {n} samples, kept {} heads", selected.len());
    let top = map.select_text_centric(10.min(map.n_layers() * map.n_heads()))?;
    println!("layer,head,votes");
    let mut rows: Vec<(usize, usize, u64)> = top.iter().map(|(l, h)| (l, h, map.count(l, h))).collect();
    rows.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    for (l, h, c) in rows {
        println!("{l},{h},{c}");
    }
    Ok(())
}

/// Profiled map and the heads selected from it under the current κ_tch.
fn load_profile(cfg: &RunConfig) -> Result<(HeadSet, HeadFrequencyMap), CliError> {
    let path = cfg.profile_path();
    if !path.exists() {
        return Err(CliError::usage(format!(
            "profile not found: {} (run `ascd profile` first)",
            path.display()
        )));
    }
    let artifact: ProfileArtifact = serde_json::from_reader(BufReader::new(File::open(&path)?))
        .map_err(|e| CliError::usage(format!("bad profile {}: {e}", path.display())))?;
    let map = artifact.frequency_map()?;
    let heads = map.select_text_centric(kappa_tch(cfg, &map))?;
    Ok((heads, map))
}

fn check_scene(world: &World, scene: usize) -> Result<(), CliError> {
    if scene >= world.scenes.len() {
        return Err(CliError::usage(format!(
            "scene {scene} out of range ({} scenes)",
            world.scenes.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct DecodeResult<'a> {
    scene: usize,
    method: &'a str,
    strategy: &'a str,
    tokens: &'a [u32],
    text: String,
}

fn cmd_decode(cfg: &RunConfig, scene: Option<usize>, probe: Option<usize>, trace: bool) -> Result<(), CliError> {
    let d = &cfg.decode;
    let s = &cfg.steering;
    // resolve the method before loading anything so bad names fail fast
    if !matches!(d.method.as_str(), "original" | "ascd" | "vcd" | "icd") {
        return Err(CliError::usage(format!("unknown method {:?}", d.method)));
    }
    let world = cfg.world()?;
    let weights = cfg.weights(&world)?;
    let scene = scene.unwrap_or(d.prompt.scene);
    check_scene(&world, scene)?;
    let probe = probe.or(d.prompt.probe_class);
    if let Some(c) = probe {
        if c >= world.n_classes() {
            return Err(CliError::usage(format!("class {c} out of range")));
        }
    }
    let method = match d.method.as_str() {
        "original" => Method::Original,
        "ascd" => Method::Ascd {
            spec: SteeringSpec {
                heads_pos: load_profile(cfg)?.0,
                ..s.clone()
            },
            critical_tokens: None,
        },
        "vcd" => Method::Vcd {
            sigma: d.vcd_sigma,
            alpha: s.alpha,
            beta: s.beta,
            seed: cfg.seed,
        },
        _ => Method::Icd {
            prefix: d.icd_prefix.clone().unwrap_or_else(|| world.vocab().confuser_prefix()),
            alpha: s.alpha,
            beta: s.beta,
        },
    };
    let (seq, max_new) = match probe {
        Some(c) => (world.probe_sequence(scene, c), 1),
        None => (world.caption_sequence(scene), d.max_new_tokens),
    };
    let dc = DecodeConfig {
        strategy: d.strategy.clone(),
        max_new_tokens: max_new,
        stop_tokens: vec![EOS],
        method,
        cutoff: d.cutoff,
        trace,
    };
    let gen = generate(&weights, &seq, &dc)?;
    let text = world.vocab().render(&gen.tokens, &world.ontology);
    println!("{text}");
    write_json(
        &cfg.out_dir.join("decode.json"),
        &DecodeResult {
            scene,
            method: &d.method,
            strategy: d.strategy.name(),
            tokens: &gen.tokens,
            text,
        },
    )?;
    if trace {
        write_trace_jsonl(create(&cfg.out_dir.join("trace.jsonl"))?, &gen.traces)?;
    }
    Ok(())
}

fn profile_if_needed(cfg: &RunConfig) -> Result<Option<(HeadSet, HeadFrequencyMap)>, CliError> {
    if cfg.eval.methods.iter().any(MethodSpec::needs_profile) {
        load_profile(cfg).map(Some)
    } else {
        Ok(None)
    }
}

fn evaluate(cfg: &RunConfig) -> Result<EvalOutput, CliError> {
    cfg.eval.validate()?;
    let profile = profile_if_needed(cfg)?;
    let world = cfg.world()?;
    let weights = cfg.weights(&world)?;
    Ok(run_eval(&weights, &world, profile.as_ref().map(|p| &p.0), &cfg.eval)?)
}

fn print_summary(out: &EvalOutput) {
    println!(
        "{:<16} {:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>5}",
        "method", "strategy", "pope_acc", "pope_f1", "planted", "chair_s", "chair_i", "fail"
    );
    for s in &out.summary {
        println!(
            "{:<16} {:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>5}",
            s.method,
            s.strategy,
            pct(s.pope_accuracy),
            pct(s.pope_f1),
            pct(s.planted_accuracy),
            pct(s.chair_s),
            pct(s.chair_i),
            s.failures
        );
    }
}

fn cmd_eval(cfg: &RunConfig, from_records: Option<&Path>) -> Result<(), CliError> {
    let out = match from_records {
        Some(path) => {
            let f =
                File::open(path).map_err(|e| CliError::usage(format!("records not found: {}: {e}", path.display())))?;
            rescore(read_records_jsonl(BufReader::new(f))?, cfg.seed)?
        }
        None => evaluate(cfg)?,
    };
    let dir = &cfg.out_dir;
    write_results_csv(create(&dir.join("results.csv"))?, &out)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    if from_records.is_none() {
        write_records_jsonl(create(&dir.join("records.jsonl"))?, &out.records)?;
    }
    print_summary(&out);
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.sweep.is_empty() {
        return Err(CliError::usage("sweep grid is empty"));
    }
    cfg.eval.validate()?;
    let profile = profile_if_needed(cfg)?;
    let profile = match profile {
        Some(p) => Some(p),
        None if !cfg.sweep.kappa_tch.is_empty() => Some(load_profile(cfg)?),
        None => None,
    };
    let world = cfg.world()?;
    let weights = cfg.weights(&world)?;
    let points = sweep(
        &weights,
        &world,
        profile.as_ref().map(|p| &p.0),
        profile.as_ref().map(|p| &p.1),
        &cfg.eval,
        &cfg.sweep,
    )?;
    write_sweep_csv(create(&cfg.out_dir.join("sweep.csv"))?, &points)?;
    println!("parameter,setting,method,strategy,pope_acc,chair_s");
    for p in &points {
        for s in &p.output.summary {
            println!(
                "{},{},{},{},{},{}",
                p.parameter,
                p.value,
                s.method,
                s.strategy,
                pct(s.pope_accuracy),
                pct(s.chair_s)
            );
        }
    }
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, reference: &str) -> Result<(), CliError> {
    let out = evaluate(cfg)?;
    let deltas = compare(&out.rows, reference)?;
    let mut f = create(&cfg.out_dir.join("compare.csv"))?;
    writeln!(f, "method,strategy,metric,kind,value,reference,delta")?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for d in &deltas {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            d.method,
            d.strategy,
            d.metric,
            d.kind.name(),
            num(d.value),
            num(d.reference),
            num(d.delta)
        )?;
    }
    f.flush()?;
    println!("deltas against {reference} (percentage points)");
    println!(
        "{:<16} {:<8} {:<12} {:<10} {:>8}",
        "method", "strategy", "kind", "metric", "delta"
    );
    for d in deltas
        .iter()
        .filter(|d| matches!(d.metric.as_str(), "accuracy" | "f1" | "chair_s" | "chair_i"))
    {
        println!(
            "{:<16} {:<8} {:<12} {:<10} {:>8}",
            d.method,
            d.strategy,
            d.kind.name(),
            d.metric,
            pct(d.delta)
        );
    }
    Ok(())
}
