// SPDX-License-Identifier: MIT OR Apache-2.0

//! Quantitative studies over traces: which experts each domain uses, how
//! close the top expert alone gets to the full ensemble, what perplexity
//! costs fewer active experts incur, and pruning by specialization.

pub mod perplexity;
pub mod prune;
pub mod similarity;
pub mod specialization;

pub use perplexity::{perplexity, perplexity_curve, perplexity_vs_k, PerplexityCurve};
pub use prune::{prune_experts, prune_experts_with, prune_plan, union_plan};
pub use similarity::{similarity_profile, similarity_profile_at, SimilarityProfile};
pub use specialization::{expert_specialization, SpecializationCounter, SpecializationTable};
