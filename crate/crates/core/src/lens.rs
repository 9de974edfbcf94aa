// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens over the residual stream, extended to individual experts.
//!
//! Every decode uses the model's final norm gain and unembedding, whatever
//! the layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{BOS_ID, EOS_ID};
use crate::model::forward::{combine_expert_outputs, LayerTrace, TokenRouting, Trace};
use crate::model::weights::Checkpoint;
use crate::tensor::{argmax, rms_norm_slice, softmax_slice, vec_mat, Real, Tensor};

fn check_head<T: Real>(d: usize, final_gain: &Tensor<T>, unembed: &Tensor<T>) -> Result<()> {
    if final_gain.len() != d || unembed.shape().len() != 2 || unembed.shape()[0] != d {
        return Err(Error::Dimension {
            op: "logit_lens",
            left: vec![d],
            right: unembed.shape().to_vec(),
        });
    }
    Ok(())
}

fn decode<T: Real>(h: &[T], final_gain: &Tensor<T>, unembed: &Tensor<T>) -> Vec<T> {
    let (n, _) = rms_norm_slice(h, final_gain.data());
    vec_mat(&n, unembed.data(), unembed.shape()[1])
}

/// `rms_norm(h, final_gain) · W_U`.
pub fn logit_lens<T: Real>(
    h: &Tensor<T>,
    final_gain: &Tensor<T>,
    unembed: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_head(h.len(), final_gain, unembed)?;
    Ok(Tensor::vector(decode(h.data(), final_gain, unembed)))
}

/// Logit lens of `Σ gate_j · E_j + shared + u` over the given experts.
///
/// `shared` may be `None` to leave the shared experts out.
pub fn extended_logit_lens<T: Real>(
    gates: &[T],
    outputs: &[&Tensor<T>],
    shared: Option<&Tensor<T>>,
    u: &Tensor<T>,
    final_gain: &Tensor<T>,
    unembed: &Tensor<T>,
) -> Result<Tensor<T>> {
    if gates.is_empty() {
        return Err(Error::param(
            "extended logit lens needs at least one expert",
        ));
    }
    if gates.len() != outputs.len() {
        return Err(Error::param(format!(
            "{} gates for {} expert outputs",
            gates.len(),
            outputs.len()
        )));
    }
    let d = u.len();
    if let Some(bad) = outputs
        .iter()
        .map(|o| o.len())
        .chain(shared.map(|s| s.len()))
        .find(|&l| l != d)
    {
        return Err(Error::Dimension {
            op: "extended_logit_lens",
            left: vec![bad],
            right: vec![d],
        });
    }
    check_head(d, final_gain, unembed)?;
    let outs: Vec<&[T]> = outputs.iter().map(|o| o.data()).collect();
    let x = combine_expert_outputs(gates, &outs, shared.map_or(&[][..], |s| s.data()), u.data());
    Ok(Tensor::vector(decode(&x, final_gain, unembed)))
}

/// `H^{ℓ}_{k'}`: the leading `k'` experts (by gate) plus shared output and residual.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedHidden<T: Real = f32> {
    pub layer: usize,
    pub k_prime: usize,
    pub position: usize,
    pub vector: Tensor<T>,
}

fn layer_of<T: Real>(trace: &Trace<T>, layer: usize) -> Result<&LayerTrace<T>> {
    trace.layers.get(layer).ok_or_else(|| {
        Error::param(format!(
            "layer {layer} not in trace ({} layers)",
            trace.layers.len()
        ))
    })
}

fn token_of<T: Real>(lt: &LayerTrace<T>, position: usize) -> Result<&TokenRouting<T>> {
    lt.tokens.get(position).ok_or_else(|| {
        Error::param(format!(
            "position {position} not in trace ({} tokens)",
            lt.tokens.len()
        ))
    })
}

fn check_k_prime<T: Real>(tr: &TokenRouting<T>, k_prime: usize) -> Result<()> {
    let k = tr.expert_outputs.len();
    if k_prime == 0 || k_prime > k {
        return Err(Error::param(format!("k' = {k_prime} outside 1..={k}")));
    }
    Ok(())
}

/// Rebuilds the hidden state from one traced token keeping `k'` experts.
pub fn restricted_from_routing<T: Real>(
    tr: &TokenRouting<T>,
    k_prime: usize,
    include_shared: bool,
) -> Result<Tensor<T>> {
    check_k_prime(tr, k_prime)?;
    let outs: Vec<&[T]> = tr.expert_outputs[..k_prime]
        .iter()
        .map(|o| o.data())
        .collect();
    let shared = if include_shared {
        tr.shared_output.data()
    } else {
        &[]
    };
    Ok(Tensor::vector(combine_expert_outputs(
        &tr.gates[..k_prime],
        &outs,
        shared,
        tr.u.data(),
    )))
}

pub fn restricted_hidden<T: Real>(
    trace: &Trace<T>,
    layer: usize,
    k_prime: usize,
    position: usize,
) -> Result<RestrictedHidden<T>> {
    let tr = token_of(layer_of(trace, layer)?, position)?;
    Ok(RestrictedHidden {
        layer,
        k_prime,
        position,
        vector: restricted_from_routing(tr, k_prime, true)?,
    })
}

/// Which hidden state a lens cell decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LensVariant {
    /// The traced layer output `h`.
    LayerOutput,
    /// The `k_prime` highest-gated experts combined.
    TopkCombined { k_prime: usize },
    /// Only the expert at gate rank `rank` (0 = highest).
    SingleExpert { rank: usize },
}

impl LensVariant {
    pub fn label(&self) -> String {
        match self {
            LensVariant::LayerOutput => "layer_output".into(),
            LensVariant::TopkCombined { k_prime } => format!("top{k_prime}"),
            LensVariant::SingleExpert { rank } => format!("expert_rank{}", rank + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCell {
    pub layer: usize,
    pub variant: LensVariant,
    pub token_id: u32,
    pub token_text: String,
    /// Softmax probability of `token_id`.
    pub confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_gate: Option<f64>,
}

/// Top-1 decodes for every layer (rows) and variant (columns) at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensGrid {
    pub position: usize,
    pub input_token: String,
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    pub cells: Vec<Vec<LensCell>>,
}

impl LensGrid {
    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_labels.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lens grid serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LensOptions {
    /// Leave shared-expert output out of the combined and single-expert cells.
    pub exclude_shared: bool,
}

/// Printable rendering of a byte-level token id.
pub fn token_text(id: u32) -> String {
    match id {
        BOS_ID => "<bos>".into(),
        EOS_ID => "<eos>".into(),
        0x20 => "\u{2423}".into(),
        0x0a => "\\n".into(),
        b if b < 256 && (0x21..0x7f).contains(&b) => char::from(b as u8).to_string(),
        b if b < 256 => format!("<0x{b:02X}>"),
        other => format!("<{other}>"),
    }
}

fn make_cell<T: Real>(layer: usize, variant: LensVariant, logits: &[T]) -> LensCell {
    let id = argmax(logits);
    let probs = softmax_slice(&logits.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
    LensCell {
        layer,
        variant,
        token_id: id as u32,
        token_text: token_text(id as u32),
        confidence: probs[id],
        expert_index: None,
        expert_gate: None,
    }
}

pub fn lens_grid<T: Real>(
    trace: &Trace<T>,
    ckpt: &Checkpoint<T>,
    position: usize,
) -> Result<LensGrid> {
    lens_grid_with(trace, ckpt, position, LensOptions::default())
}

pub fn lens_grid_with<T: Real>(
    trace: &Trace<T>,
    ckpt: &Checkpoint<T>,
    position: usize,
    options: LensOptions,
) -> Result<LensGrid> {
    if position >= trace.seq_len() {
        return Err(Error::param(format!(
            "position {position} outside traced sequence of length {}",
            trace.seq_len()
        )));
    }
    if trace.layers.len() != ckpt.config.n_layers {
        return Err(Error::Consistency(format!(
            "trace has {} layers, model has {}",
            trace.layers.len(),
            ckpt.config.n_layers
        )));
    }
    let k = ckpt.config.top_k;
    let (gain, wu) = (&ckpt.final_gain, &ckpt.unembed);
    check_head(ckpt.config.d_model, gain, wu)?;
    let include_shared = !options.exclude_shared;

    let mut column_labels = vec![LensVariant::LayerOutput.label()];
    column_labels.extend((1..=k).map(|kp| LensVariant::TopkCombined { k_prime: kp }.label()));
    column_labels.extend((0..k).map(|r| LensVariant::SingleExpert { rank: r }.label()));

    let mut cells = Vec::with_capacity(trace.layers.len());
    for lt in &trace.layers {
        let tr = token_of(lt, position)?;
        check_k_prime(tr, k)?;
        let l = lt.layer;
        let mut row = Vec::with_capacity(1 + 2 * k);
        row.push(make_cell(
            l,
            LensVariant::LayerOutput,
            &decode(tr.h.data(), gain, wu),
        ));
        for kp in 1..=k {
            let x = restricted_from_routing(tr, kp, include_shared)?;
            row.push(make_cell(
                l,
                LensVariant::TopkCombined { k_prime: kp },
                &decode(x.data(), gain, wu),
            ));
        }
        let shared = if include_shared {
            tr.shared_output.data()
        } else {
            &[]
        };
        for r in 0..k {
            let x = combine_expert_outputs(
                &tr.gates[r..=r],
                &[tr.expert_outputs[r].data()],
                shared,
                tr.u.data(),
            );
            let mut cell = make_cell(
                l,
                LensVariant::SingleExpert { rank: r },
                &decode(&x, gain, wu),
            );
            cell.expert_index = Some(tr.selected[r]);
            cell.expert_gate = Some(tr.gates[r].as_f64());
            row.push(cell);
        }
        cells.push(row);
    }
    Ok(LensGrid {
        position,
        input_token: token_text(trace.tokens[position]),
        row_labels: (0..cells.len()).map(|l| format!("layer {l}")).collect(),
        column_labels,
        cells,
    })
}
