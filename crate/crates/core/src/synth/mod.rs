// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic scenes, probes, a hand-built text-prior model and the
//! hallucination benchmark built on them.

pub mod eval;
pub mod metrics;
pub mod prior;
pub mod probes;
pub mod vocab;
pub mod world;

pub use eval::{
    compare, read_records_jsonl, rescore, run_eval, score_records, sweep, write_records_jsonl, write_results_csv,
    write_sweep_csv, DeltaRow, EvalOutput, EvalRow, EvalSpec, EvalSummary, MethodSpec, SweepGrid, SweepPoint,
};
pub use metrics::{chair_scores, pope_scores, BinaryMetrics, ChairScores, EvalRecord, PopeScores, TaskKind};
pub use prior::{build_prior_model, PriorGains};
pub use probes::{build_probes, is_planted, Probe, ProbeKind};
pub use vocab::Vocab;
pub use world::{BiasPair, SceneGraph, SceneObject, World, WorldConfig};
