// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level vocabulary: 256 byte values plus two special ids.
pub const BYTE_VOCAB: usize = 258;
pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_expert_hidden: usize,
    pub n_routed_experts: usize,
    pub n_shared_experts: usize,
    pub top_k: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Divide selected gates by their sum. Off by default: gates are the raw
    /// softmax slice.
    #[serde(default)]
    pub renormalize_gates: bool,
    /// Per-layer sorted sets of routed experts that survive pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_keep: Option<Vec<Vec<usize>>>,
    /// When pruned, mask removed experts before the router softmax so that
    /// probability mass renormalizes over survivors. Off by default: the
    /// router distribution is left untouched and removed experts are only
    /// excluded from selection.
    #[serde(default)]
    pub prune_renormalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_layers: 4,
            n_heads: 2,
            d_expert_hidden: 32,
            n_routed_experts: 16,
            n_shared_experts: 1,
            top_k: 4,
            max_seq_len: 64,
            seed: 1,
            renormalize_gates: false,
            expert_keep: None,
            prune_renormalize: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_expert_hidden", self.d_expert_hidden),
            ("n_routed_experts", self.n_routed_experts),
            ("top_k", self.top_k),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.top_k > self.n_routed_experts {
            return Err(Error::param(format!(
                "top_k = {} exceeds n_routed_experts = {}",
                self.top_k, self.n_routed_experts
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::param(format!(
                "d_model = {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        if let Some(keep) = &self.expert_keep {
            if keep.len() != self.n_layers {
                return Err(Error::param(format!(
                    "expert_keep has {} layers, model has {}",
                    keep.len(),
                    self.n_layers
                )));
            }
            for (l, set) in keep.iter().enumerate() {
                if set.len() < self.top_k {
                    return Err(Error::param(format!(
                        "layer {l} keeps {} experts, fewer than top_k = {}",
                        set.len(),
                        self.top_k
                    )));
                }
                if set.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::param(format!(
                        "layer {l} keep-set is not strictly ascending"
                    )));
                }
                if set.last().is_some_and(|&e| e >= self.n_routed_experts) {
                    return Err(Error::param(format!(
                        "layer {l} keep-set names an unknown expert"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Whether routed expert `e` of `layer` survives pruning.
    pub fn expert_kept(&self, layer: usize, e: usize) -> bool {
        match &self.expert_keep {
            None => true,
            Some(keep) => keep[layer].binary_search(&e).is_ok(),
        }
    }

    /// Uniform routing share `k/n`.
    pub fn uniform_baseline(&self) -> f64 {
        self.top_k as f64 / self.n_routed_experts as f64
    }
}
