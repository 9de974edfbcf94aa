// SPDX-License-Identifier: MIT OR Apache-2.0

//! # moelens
//!
//! A small mixture-of-experts transformer that records every routing
//! decision, expert output and residual-stream state, together with the
//! tools to study them:
//!
//! - [`analysis`]: per-domain expert specialization, single-expert versus
//!   ensemble cosine similarity, perplexity as a function of active experts,
//!   and specialization-driven pruning.
//! - [`lens`]: logit lens and its per-expert extension, decoding the
//!   residual stream plus any prefix of the routed experts.
//! - [`trainer`]: synthetic multi-domain corpora and an SGD trainer with an
//!   expert-level balance loss.
//! - [`model`]: the model itself and its checkpoint format.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod lens;
pub mod model;
pub mod prng;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use model::{
    load_checkpoint, model_forward, save_checkpoint, Checkpoint, LayerTrace, ModelConfig,
    TokenRouting, Trace,
};
pub use prng::Prng;
pub use tensor::{cosine, matmul, rms_layer_norm, softmax_rows, top_k_indices, Real, Tensor};
