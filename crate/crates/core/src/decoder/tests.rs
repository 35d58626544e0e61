// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::model::{build_model, InitMode, ModelConfig};
use crate::steering::{HeadSet, KappaVis};

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: 12,
        n_visual: 4,
        max_seq: 16,
        normalize_visual: true,
    }
}

fn model(seed: u64) -> Weights {
    let mut w = build_model(&config(), &InitMode::SeededRandom { seed }).unwrap();
    for t in w.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
    }
    w
}

fn prompt(seed: u64) -> MultimodalSequence {
    let mut rng = Rng::new(seed);
    let feats = (0..4).map(|_| (0..8).map(|_| rng.gaussian()).collect()).collect();
    let text = (0..3).map(|_| rng.below(12) as u32).collect();
    MultimodalSequence::new(feats, text)
}

fn decode(method: Method, strategy: Strategy) -> DecodeConfig {
    DecodeConfig {
        strategy,
        max_new_tokens: 5,
        stop_tokens: vec![2],
        method,
        cutoff: CutoffRule::Fused,
        trace: true,
    }
}

fn ascd(spec: SteeringSpec) -> Method {
    Method::Ascd {
        spec,
        critical_tokens: None,
    }
}

fn degenerate_spec() -> SteeringSpec {
    SteeringSpec {
        heads_pos: HeadSet::all(2, 2),
        alpha_pos: 0.0,
        alpha_neg: 0.0,
        alpha: 0.0,
        beta: 1e-9,
        ..SteeringSpec::default()
    }
}

#[test]
fn nucleus_worked_example() {
    let p = nucleus_filter(&[0.5, 0.3, 0.2], 0.7).unwrap();
    assert!((p[0] - 0.625).abs() < 1e-12);
    assert!((p[1] - 0.375).abs() < 1e-12);
    assert_eq!(p[2], 0.0);
    assert_eq!(nucleus_filter(&[0.5, 0.3, 0.2], 1.0).unwrap(), vec![0.5, 0.3, 0.2]);
    let p = nucleus_filter(&[0.2, 0.5, 0.3], 0.4).unwrap();
    assert_eq!(p, vec![0.0, 1.0, 0.0]);
}

#[test]
fn nucleus_sampling_stays_in_support() {
    let mut rng = Rng::new(1);
    let probs = nucleus_filter(&[0.5, 0.3, 0.2], 0.7).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..20_000 {
        counts[sample_f64(&probs, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[2], 0);
    assert!((counts[0] as f64 / 20_000.0 - 0.625).abs() < 0.02);
}

#[test]
fn greedy_is_deterministic() {
    let w = model(1);
    let cfg = decode(Method::Original, Strategy::Greedy);
    let a = generate(&w, &prompt(2), &cfg).unwrap();
    let b = generate(&w, &prompt(2), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.traces.len(), a.tokens.len());
}

#[test]
fn width_one_beam_matches_greedy() {
    for seed in 0..10 {
        let w = model(seed);
        for method in [
            Method::Original,
            ascd(SteeringSpec {
                heads_pos: HeadSet::all(2, 2),
                ..SteeringSpec::default()
            }),
        ] {
            let mut greedy = decode(method.clone(), Strategy::Greedy);
            greedy.cutoff = CutoffRule::Positive;
            let mut beam = decode(method, Strategy::Beam { width: 1 });
            beam.cutoff = CutoffRule::Positive;
            let g = generate(&w, &prompt(seed + 100), &greedy).unwrap();
            let b = generate(&w, &prompt(seed + 100), &beam).unwrap();
            assert_eq!(g.tokens, b.tokens, "seed {seed}");
        }
    }
}

#[test]
fn wider_beam_respects_the_budget() {
    let w = model(3);
    let g = generate(&w, &prompt(4), &decode(Method::Original, Strategy::Beam { width: 3 })).unwrap();
    assert!(!g.tokens.is_empty() && g.tokens.len() <= 5);
}

#[test]
fn degenerate_steering_matches_original() {
    for seed in 0..10 {
        let w = model(seed);
        let base = generate(&w, &prompt(seed), &decode(Method::Original, Strategy::Greedy)).unwrap();
        let steered = generate(&w, &prompt(seed), &decode(ascd(degenerate_spec()), Strategy::Greedy)).unwrap();
        assert_eq!(base.tokens, steered.tokens);
        for (a, b) in base.traces.iter().zip(&steered.traces) {
            assert_eq!(a.pos, b.pos);
            assert_eq!(b.raw.as_ref().unwrap(), &b.pos);
        }
    }
}

#[test]
fn noiseless_vcd_cancels() {
    let w = model(5);
    let m = Method::Vcd {
        sigma: 0.0,
        alpha: 1.0,
        beta: 0.1,
        seed: 0,
    };
    let g = generate(&w, &prompt(6), &decode(m, Strategy::Greedy)).unwrap();
    for t in &g.traces {
        assert_eq!(t.pos, *t.neg.as_ref().unwrap());
        assert_eq!(t.raw.as_ref().unwrap(), &t.pos);
    }
}

#[test]
fn icd_prefix_changes_negative_branch() {
    let w = model(7);
    let run = |prefix: Vec<u32>| {
        let m = Method::Icd {
            prefix,
            alpha: 1.0,
            beta: 0.1,
        };
        let mut cfg = decode(m, Strategy::Greedy);
        cfg.max_new_tokens = 1;
        cfg.cutoff = CutoffRule::Positive;
        generate(&w, &prompt(8), &cfg).unwrap().traces[0].neg.clone().unwrap()
    };
    assert_ne!(run(vec![9, 10]), run(vec![9, 10, 9, 10]));
}

#[test]
fn positive_branch_equals_standalone_steered_decode() {
    let w = model(9);
    let seq = prompt(10);
    let spec = SteeringSpec {
        heads_pos: HeadSet::from_pairs([(0, 1), (1, 0)]).unwrap(),
        kappa_vis: KappaVis::Count(1),
        ..SteeringSpec::default()
    };
    let before = w.clone();
    let mut state = DecodeState::start(&w, &seq, &ascd(spec.clone()), CutoffRule::Fused).unwrap();
    let trace = state.step(&w).unwrap();
    assert_eq!(w, before);

    let inputs = seq.inputs();
    let mut cache = KvCache::new(&w);
    w.extend(&mut cache, &inputs[..inputs.len() - 1], None).unwrap();
    let out = w
        .decode_step(&mut cache, &inputs[inputs.len() - 1], Some(&spec.positive_directive()))
        .unwrap();
    assert_eq!(trace.pos, log_softmax_row_f64(&out.logits).unwrap());
    assert_eq!(trace.critical.len(), 2);
    assert!(trace.divergence() > 0.0);
}

#[test]
fn steering_reaches_the_first_generated_token() {
    let w = model(11);
    let seq = prompt(12);
    let spec = SteeringSpec {
        heads_pos: HeadSet::all(2, 2),
        ..SteeringSpec::default()
    };
    let mut plain = DecodeState::start(&w, &seq, &Method::Original, CutoffRule::Fused).unwrap();
    let mut steered = DecodeState::start(&w, &seq, &ascd(spec), CutoffRule::Fused).unwrap();
    assert_ne!(plain.step(&w).unwrap().pos, steered.step(&w).unwrap().pos);
}

#[test]
fn invalid_configs_are_rejected() {
    let w = model(13);
    let seq = prompt(14);
    let bad = [
        decode(Method::Original, Strategy::Beam { width: 0 }),
        decode(
            Method::Original,
            Strategy::Nucleus {
                top_p: 0.0,
                temperature: 1.0,
                seed: 0,
            },
        ),
        decode(
            Method::Vcd {
                sigma: -1.0,
                alpha: 1.0,
                beta: 0.1,
                seed: 0,
            },
            Strategy::Greedy,
        ),
        decode(
            Method::Icd {
                prefix: vec![],
                alpha: 1.0,
                beta: 0.1,
            },
            Strategy::Greedy,
        ),
    ];
    for cfg in &bad {
        assert!(
            matches!(generate(&w, &seq, cfg), Err(Error::InvalidConfig(_))),
            "{cfg:?}"
        );
    }
    let mut long = decode(Method::Original, Strategy::Greedy);
    long.max_new_tokens = 20;
    assert!(matches!(generate(&w, &seq, &long), Err(Error::SequenceOverflow { .. })));
}

#[test]
fn nucleus_generation_is_seeded() {
    let w = model(15);
    let s = Strategy::Nucleus {
        top_p: 0.9,
        temperature: 1.0,
        seed: 4,
    };
    let a = generate(&w, &prompt(16), &decode(Method::Original, s.clone())).unwrap();
    let b = generate(&w, &prompt(16), &decode(Method::Original, s)).unwrap();
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn method_round_trips_through_json() {
    let m = ascd(SteeringSpec::default());
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
    assert!(serde_json::from_str::<Method>(r#"{"kind":"bogus"}"#).is_err());
}

#[test]
fn positive_cutoff_never_empties_the_support() {
    let mut rng = Rng::new(17);
    for _ in 0..10_000 {
        let n = 2 + rng.below(10);
        let logits = |rng: &mut Rng| -> Vec<f32> { (0..n).map(|_| 8.0 * rng.gaussian()).collect() };
        let pos = log_softmax_row_f64(&logits(&mut rng)).unwrap();
        let neg = log_softmax_row_f64(&logits(&mut rng)).unwrap();
        let alpha = 3.0 * rng.uniform();
        let beta = 0.01 + 0.99 * rng.uniform();
        let f = fuse(&pos, &neg, alpha, beta, CutoffRule::Positive).unwrap();
        let best = argmax_f64(&f.masked).unwrap();
        assert!(f.masked[best].is_finite());
    }
}

#[test]
fn literal_cutoff_can_empty_the_support() {
    // every log-prob is <= 0, so a fused maximum above -ln(beta) masks all
    let pos = [-0.1, -2.4];
    let neg = [-5.0, -0.1];
    let err = fuse(&pos, &neg, 1.0, 0.1, CutoffRule::Fused).unwrap_err();
    assert!(matches!(err, Error::EmptyAfterTruncation));
}
