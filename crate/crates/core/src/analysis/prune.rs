// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::analysis::specialization::SpecializationTable;
use crate::error::{Error, Result};
use crate::model::weights::Checkpoint;
use crate::tensor::{top_k_indices, Real};

/// Experts whose share for `domain` reaches `threshold · k/n`, padded with
/// the next-highest shares up to `k`. Returned in ascending order.
pub fn prune_plan(
    table: &SpecializationTable,
    layer: usize,
    domain: usize,
    threshold: f64,
) -> Result<Vec<usize>> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::param(format!(
            "prune threshold must be finite and >= 0, got {threshold}"
        )));
    }
    if layer >= table.n_layers() {
        return Err(Error::param(format!("layer {layer} not in table")));
    }
    if domain >= table.domains.len() {
        return Err(Error::param(format!("domain index {domain} not in table")));
    }
    let col = table.column(layer, domain);
    let cut = threshold * table.uniform_baseline;
    let mut keep: Vec<usize> = (0..col.len()).filter(|&e| col[e] >= cut).collect();
    if keep.len() < table.k {
        for e in top_k_indices(&col, table.k)? {
            if !keep.contains(&e) && keep.len() < table.k {
                keep.push(e);
            }
        }
        keep.sort_unstable();
    }
    Ok(keep)
}

/// Per layer, the union of every domain's [`prune_plan`].
pub fn union_plan(table: &SpecializationTable, threshold: f64) -> Result<Vec<Vec<usize>>> {
    (0..table.n_layers())
        .map(|l| {
            let mut keep = Vec::new();
            for d in 0..table.domains.len() {
                keep.extend(prune_plan(table, l, d, threshold)?);
            }
            keep.sort_unstable();
            keep.dedup();
            Ok(keep)
        })
        .collect()
}

/// Drops routed experts outside `keep_sets`; removed experts can no longer
/// be selected and their weights are not persisted.
pub fn prune_experts<T: Real>(
    ckpt: &Checkpoint<T>,
    keep_sets: &[Vec<usize>],
) -> Result<Checkpoint<T>> {
    prune_experts_with(ckpt, keep_sets, false)
}

/// As [`prune_experts`]; with `renormalize`, removed experts are also masked
/// before the router softmax so survivors' probabilities sum to one.
pub fn prune_experts_with<T: Real>(
    ckpt: &Checkpoint<T>,
    keep_sets: &[Vec<usize>],
    renormalize: bool,
) -> Result<Checkpoint<T>> {
    let config = &ckpt.config;
    if keep_sets.len() != config.n_layers {
        return Err(Error::param(format!(
            "{} keep-sets for {} layers",
            keep_sets.len(),
            config.n_layers
        )));
    }
    let mut sorted = Vec::with_capacity(keep_sets.len());
    for (l, set) in keep_sets.iter().enumerate() {
        let mut s = set.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param(format!(
                "layer {l} keep-set repeats an expert"
            )));
        }
        if s.len() < config.top_k {
            return Err(Error::param(format!(
                "layer {l} keeps {} experts, fewer than top_k = {}",
                s.len(),
                config.top_k
            )));
        }
        if let Some(&e) = s
            .iter()
            .find(|&&e| e >= config.n_routed_experts || !config.expert_kept(l, e))
        {
            return Err(Error::param(format!(
                "layer {l}: expert {e} is unknown or already pruned"
            )));
        }
        sorted.push(s);
    }
    let mut out = ckpt.clone();
    for (l, set) in sorted.iter().enumerate() {
        for (e, slot) in out.layers[l].experts.iter_mut().enumerate() {
            if set.binary_search(&e).is_err() {
                *slot = None;
            }
        }
    }
    out.config.expert_keep = Some(sorted);
    out.config.prune_renormalize = renormalize;
    out.config.validate()?;
    Ok(out)
}
