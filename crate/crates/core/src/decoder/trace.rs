// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-lines step traces, truncated to the top entries plus the chosen
//! token.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::StepTrace;
use crate::error::{Error, Result};
use crate::numerics::top_k_indices;
use crate::steering::CriticalTokenSet;

/// Entries kept per line, ranked by final score.
pub const TRACE_TOP: usize = 20;

/// Scores of one token. Negative infinity and absent branches are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub token: u32,
    pub pos: Option<f64>,
    pub neg: Option<f64>,
    pub raw: Option<f64>,
    #[serde(rename = "final")]
    pub final_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: usize,
    pub chosen: Option<u32>,
    pub cutoff: Option<f64>,
    pub top: Vec<TraceEntry>,
    pub critical: Vec<CriticalTokenSet>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl TraceLine {
    pub fn from_trace(t: &StepTrace) -> Result<Self> {
        let k = TRACE_TOP.min(t.final_scores.len());
        let mut tokens = top_k_indices(&t.final_scores, k)?;
        if let Some(c) = t.chosen {
            if !tokens.contains(&(c as usize)) {
                tokens.push(c as usize);
            }
        }
        let top = tokens
            .into_iter()
            .map(|i| TraceEntry {
                token: i as u32,
                pos: finite(t.pos[i]),
                neg: t.neg.as_ref().and_then(|n| finite(n[i])),
                raw: t.raw.as_ref().and_then(|r| finite(r[i])),
                final_score: finite(t.final_scores[i]),
            })
            .collect();
        Ok(Self {
            step: t.step,
            chosen: t.chosen,
            cutoff: t.cutoff.and_then(finite),
            top,
            critical: t.critical.clone(),
        })
    }
}

/// Writes one JSON object per step.
pub fn write_trace_jsonl<W: Write>(mut w: W, traces: &[StepTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, &TraceLine::from_trace(t)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceLine>> {
    r.lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| Error::Format(format!("bad trace line: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_keep_top_entries_and_chosen() {
        let n = 30;
        let mut final_scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        final_scores[29] = f64::NEG_INFINITY;
        let t = StepTrace {
            step: 3,
            pos: final_scores.clone(),
            neg: Some(vec![-1.0; n]),
            raw: Some(final_scores.clone()),
            final_scores,
            cutoff: Some(-2.5),
            chosen: Some(29),
            critical: vec![],
        };
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &[t.clone(), t]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"final\":null"));
        let lines = read_trace_jsonl(&buf[..]).unwrap();
        assert_eq!(lines[0].top.len(), TRACE_TOP + 1);
        assert_eq!(lines[0].top[0].token, 0);
        let chosen = lines[0].top.last().unwrap();
        assert_eq!((chosen.token, chosen.final_score, chosen.neg), (29, None, Some(-1.0)));
    }
}
