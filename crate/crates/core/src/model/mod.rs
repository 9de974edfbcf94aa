// SPDX-License-Identifier: MIT OR Apache-2.0

//! The instrumented mixture-of-experts transformer.

pub(crate) mod backward;
pub mod config;
pub mod forward;
pub mod io;
pub mod weights;

pub use config::{ModelConfig, BOS_ID, BYTE_VOCAB, EOS_ID};
pub use forward::{
    combine_expert_outputs, model_forward, moe_layer_forward, route, LayerTrace, TokenRouting,
    Trace,
};
pub use io::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use weights::{AttentionWeights, Checkpoint, ExpertWeights, LayerWeights, RouterWeights};
