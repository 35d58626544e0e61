// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn ascd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ascd"))
        .args(args)
        .output()
        .expect("spawn ascd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes `config` plus a small world into `dir` and returns the path.
fn config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "out_dir": dir.join("out"),
        "world": { "kind": "generate", "config": { "n_scenes": 12 } },
    });
    let obj = cfg.as_object_mut().unwrap();
    for (k, v) in extra.as_object().expect("object").iter() {
        obj.insert(k.clone(), v.clone());
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let o = ascd(args);
    assert_eq!(code(&o), 0, "ascd {args:?} failed: {}", stderr(&o));
    o
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn worldgen_is_reproducible_per_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["worldgen", "--seed", "7", "--out", s(&a)]);
    run_ok(&["worldgen", "--seed", "7", "--out", s(&b)]);
    for f in ["world.json", "world.features"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("effective_config.worldgen.json").exists());
    let c = tmp.path().join("c");
    run_ok(&["worldgen", "--seed", "8", "--out", s(&c)]);
    assert_ne!(
        fs::read(a.join("world.json")).unwrap(),
        fs::read(c.join("world.json")).unwrap()
    );
}

#[test]
fn worldgen_honours_config_and_rejects_bad_values() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        json!({ "world": { "kind": "generate", "config": {
            "n_classes": 4, "n_scenes": 50, "bias": [{ "cue": 0, "target": 1, "prob": 0.5 }]
        } } }),
    );
    run_ok(&["worldgen", "--config", s(&cfg)]);
    let world = read_json(&tmp.path().join("out/world.json"));
    assert_eq!(world["scenes"].as_array().unwrap().len(), 50);
    assert_eq!(world["ontology"].as_array().unwrap().len(), 4);

    let bad = config(
        tmp.path(),
        json!({ "world": { "kind": "generate", "config": { "n_scenes": 0 } } }),
    );
    let o = ascd(&["worldgen", "--config", s(&bad)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let missing = ascd(&["worldgen", "--config", s(&tmp.path().join("nope.json"))]);
    assert_eq!(code(&missing), 2);
    fs::write(tmp.path().join("broken.json"), "{ not json").unwrap();
    assert_eq!(
        code(&ascd(&["worldgen", "--config", s(&tmp.path().join("broken.json"))])),
        2
    );
    assert_eq!(code(&ascd(&["no-such-command"])), 2);
}

#[test]
fn profile_writes_artifacts_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), json!({}));
    let o = run_ok(&["profile", "--config", s(&cfg)]);
    assert!(stdout(&o).starts_with("layer,head,votes\n"));
    let out = tmp.path().join("out");
    let first: Vec<Vec<u8>> = ["heads.json", "profile.json", "heatmap.csv"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    run_ok(&["profile", "--config", s(&cfg)]);
    for (f, bytes) in ["heads.json", "profile.json", "heatmap.csv"].iter().zip(&first) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), bytes, "{f} changed between runs");
    }
    let profile = read_json(&out.join("profile.json"));
    assert!(profile.is_object());
    assert!(String::from_utf8_lossy(&first[2]).starts_with("layer,head,count,frequency\n"));
}

#[test]
fn profile_reports_missing_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        json!({ "model": { "kind": "file", "path": tmp.path().join("absent.ascdw") } }),
    );
    let o = ascd(&["profile", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model not found"), "{}", stderr(&o));
}

fn decode_tokens(out: &Path) -> Vec<u64> {
    read_json(&out.join("decode.json"))["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_u64().unwrap())
        .collect()
}

#[test]
fn degenerate_steering_decodes_like_the_original() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        json!({ "steering": { "alpha_pos": 0.0, "alpha_neg": 0.0, "alpha": 0.0, "beta": 1e-9 } }),
    );
    run_ok(&["profile", "--config", s(&cfg)]);
    let out = tmp.path().join("out");
    for scene in ["0", "3", "7"] {
        run_ok(&["decode", "--config", s(&cfg), "--method", "original", "--scene", scene]);
        let base = decode_tokens(&out);
        run_ok(&["decode", "--config", s(&cfg), "--method", "ascd", "--scene", scene]);
        assert_eq!(decode_tokens(&out), base, "scene {scene}");
    }
}

#[test]
fn decode_trace_has_one_line_per_token() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), json!({}));
    run_ok(&["profile", "--config", s(&cfg)]);
    let out = tmp.path().join("out");
    for method in ["original", "ascd", "vcd", "icd"] {
        run_ok(&[
            "decode",
            "--config",
            s(&cfg),
            "--method",
            method,
            "--scene",
            "2",
            "--trace",
        ]);
        let n = decode_tokens(&out).len();
        let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
        assert_eq!(trace.lines().count(), n, "{method}");
    }
    run_ok(&["decode", "--config", s(&cfg), "--method", "original", "--probe", "1"]);
    assert_eq!(decode_tokens(&out).len(), 1);
}

#[test]
fn decode_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), json!({}));
    let o = ascd(&["decode", "--config", s(&cfg), "--method", "bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown method"));
    // ascd needs a profile first
    let o = ascd(&["decode", "--config", s(&cfg), "--method", "ascd"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("profile not found"), "{}", stderr(&o));
    assert_eq!(
        code(&ascd(&[
            "decode",
            "--config",
            s(&cfg),
            "--method",
            "original",
            "--scene",
            "99"
        ])),
        2
    );
    assert_eq!(
        code(&ascd(&["decode", "--config", s(&cfg), "--strategy", "sideways"])),
        2
    );
    let o = ascd(&["decode", "--config", s(&cfg), "--method", "original", "--method", "vcd"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_rescoring_matches_the_live_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), json!({}));
    run_ok(&["profile", "--config", s(&cfg)]);
    let out = tmp.path().join("out");
    let o = run_ok(&["eval", "--config", s(&cfg)]);
    assert!(stdout(&o).contains("pope_acc"));
    let live = read_json(&out.join("summary.json"));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("method,strategy,metric,kind,value,seed\n"));
    for m in ["original", "ascd", "vcd", "icd"] {
        assert!(results.lines().any(|l| l.starts_with(&format!("{m},greedy,"))), "{m}");
    }

    let records = tmp.path().join("records.jsonl");
    fs::rename(out.join("records.jsonl"), &records).unwrap();
    run_ok(&["eval", "--config", s(&cfg), "--from-records", s(&records)]);
    assert_eq!(read_json(&out.join("summary.json")), live);
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), results);

    let o = ascd(&[
        "eval",
        "--config",
        s(&cfg),
        "--from-records",
        s(&tmp.path().join("gone.jsonl")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_without_profile_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), json!({}));
    let o = ascd(&["eval", "--config", s(&cfg), "--method", "ascd"]);
    assert_eq!(code(&o), 2);
    // baselines alone need no profile
    run_ok(&["eval", "--config", s(&cfg), "--method", "original", "--method", "vcd"]);
}

#[test]
fn sweep_rows_follow_the_grid() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        json!({
            "eval": { "methods": [{ "kind": "original" }, { "kind": "ascd" }] },
            "sweep": { "alpha": [0.5, 1.0], "beta": [0.2] },
        }),
    );
    run_ok(&["profile", "--config", s(&cfg)]);
    run_ok(&["sweep", "--config", s(&cfg)]);
    let csv = fs::read_to_string(tmp.path().join("out/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("parameter,setting,method,strategy,metric,kind,value,seed")
    );
    // one accuracy row per grid point and method on the random split
    let acc: Vec<&str> = lines.filter(|l| l.contains(",accuracy,random,")).collect();
    assert_eq!(acc.len(), 3 * 2, "{acc:?}");

    let empty = config(tmp.path(), json!({ "sweep": {} }));
    assert_eq!(code(&ascd(&["sweep", "--config", s(&empty)])), 2);
}

#[test]
fn compare_against_itself_is_zero() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), json!({}));
    let o = run_ok(&["compare", "--config", s(&cfg), "--method", "original"]);
    assert!(stdout(&o).contains("deltas against original"));
    let csv = fs::read_to_string(tmp.path().join("out/compare.csv")).unwrap();
    let mut n = 0;
    for line in csv.lines().skip(1) {
        let delta = line.rsplit(',').next().unwrap();
        if !delta.is_empty() {
            assert_eq!(delta.parse::<f64>().unwrap(), 0.0, "{line}");
            n += 1;
        }
    }
    assert!(n > 0);
    let o = ascd(&[
        "compare",
        "--config",
        s(&cfg),
        "--method",
        "vcd",
        "--reference",
        "original",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn effective_config_records_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), json!({}));
    run_ok(&["worldgen", "--config", s(&cfg), "--seed", "11"]);
    let eff = read_json(&tmp.path().join("out/effective_config.worldgen.json"));
    assert_eq!(eff["seed"], 11);
    assert_eq!(eff["world"]["config"]["seed"], 11);
    assert_eq!(eff["eval"]["seed"], 11);
}
