// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-steering contrastive decoding on a small multimodal
//! transformer, with a synthetic grounding benchmark.

pub mod decoder;
pub mod error;
pub mod model;
pub mod numerics;
pub mod profiler;
pub mod steering;
pub mod synth;

pub use error::{Error, Result};
