// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic numeric substrate: tensors, normalization, top-k, sampling.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    argmax, check_distribution, log_softmax_row, log_softmax_row_f64, sample_categorical, softmax_row, top_k_indices,
    NORM_TOL,
};
pub use rng::Rng;
pub use tensor::{dot, Tensor};
