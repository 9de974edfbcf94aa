// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::restricted_from_routing;
use crate::model::forward::Trace;
use crate::tensor::{cosine_slices, Real};

/// Per-layer cosine between `H^{ℓ}_{k'}` and the full-ensemble `H^{ℓ}_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub domain: String,
    pub k_prime: usize,
    pub tokens: usize,
    pub mean_cos: Vec<f64>,
    /// Population standard deviation over tokens.
    pub std_cos: Vec<f64>,
}

impl SimilarityProfile {
    /// `layer,domain,mean_cos,std_cos` for several profiles.
    pub fn to_csv(profiles: &[SimilarityProfile]) -> String {
        let mut out = String::from("layer,domain,mean_cos,std_cos\n");
        for p in profiles {
            for (l, (m, s)) in p.mean_cos.iter().zip(&p.std_cos).enumerate() {
                writeln!(out, "{l},{},{m},{s}", p.domain).unwrap();
            }
        }
        out
    }
}

/// Top-1 expert versus all `k`, the headline comparison.
pub fn similarity_profile<T: Real>(traces: &[Trace<T>], domain: &str) -> Result<SimilarityProfile> {
    similarity_profile_at(traces, domain, 1)
}

pub fn similarity_profile_at<T: Real>(
    traces: &[Trace<T>],
    domain: &str,
    k_prime: usize,
) -> Result<SimilarityProfile> {
    let n_layers = traces.first().map_or(0, |t| t.layers.len());
    if n_layers == 0 {
        return Err(Error::param(
            "similarity profile needs at least one traced layer",
        ));
    }
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for trace in traces {
        if trace.layers.len() != n_layers {
            return Err(Error::Consistency("traces disagree on layer count".into()));
        }
        for (l, lt) in trace.layers.iter().enumerate() {
            for tr in &lt.tokens {
                let k = tr.expert_outputs.len();
                let a = restricted_from_routing(tr, k_prime, true)?;
                let b = restricted_from_routing(tr, k, true)?;
                per_layer[l].push(cosine_slices(a.data(), b.data()));
            }
        }
    }
    let tokens = per_layer[0].len();
    if tokens == 0 {
        return Err(Error::param("similarity profile needs at least one token"));
    }
    let mut mean_cos = Vec::with_capacity(n_layers);
    let mut std_cos = Vec::with_capacity(n_layers);
    for cs in &per_layer {
        let m = cs.iter().sum::<f64>() / cs.len() as f64;
        let v = cs.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / cs.len() as f64;
        mean_cos.push(m);
        std_cos.push(v.sqrt());
    }
    Ok(SimilarityProfile {
        domain: domain.to_string(),
        k_prime,
        tokens,
        mean_cos,
        std_cos,
    })
}
