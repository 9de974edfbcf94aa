// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm MoE transformer forward pass with full trace capture.
//!
//! Per block: `u = x + Attn(norm(x))`, then the MoE block computes
//! `h = Σ_{top-k} gate_i · E_i(norm(u)) + Σ_shared E_s(norm(u)) + u`.
//! `u` is recorded before the MoE input normalization; the normalized copy
//! feeds the router and the experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::{Checkpoint, ExpertWeights, LayerWeights, RouterWeights};
use crate::tensor::{
    matmul_slices, rms_norm_slice, silu, softmax_slice, top_k_indices, vec_mat, Real, Tensor,
};

/// Routing record of one token at one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRouting<T: Real = f32> {
    /// Post-attention residual stream entering the MoE block.
    pub u: Tensor<T>,
    /// Full router distribution over all routed experts.
    pub probs: Tensor<T>,
    /// Top-k experts, highest gate first.
    pub selected: Vec<usize>,
    /// Gate of each selected expert, aligned with `selected`.
    pub gates: Vec<T>,
    /// Unweighted output of each selected expert, aligned with `selected`.
    pub expert_outputs: Vec<Tensor<T>>,
    /// Sum of all shared expert outputs.
    pub shared_output: Tensor<T>,
    /// Layer output.
    pub h: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace<T: Real = f32> {
    pub layer: usize,
    /// Number of leading selected experts that contributed to `h`.
    pub active_k: usize,
    /// One record per sequence position.
    pub tokens: Vec<TokenRouting<T>>,
}

/// Everything recorded by a traced forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace<T: Real = f32> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Real> Trace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Activations of one feed-forward expert evaluation.
#[derive(Debug, Clone)]
pub(crate) struct FfnState<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
    pub out: Vec<T>,
}

/// Everything the backward pass needs about one token's MoE block.
#[derive(Debug, Clone)]
pub(crate) struct MoeState<T> {
    pub u: Vec<T>,
    pub un: Vec<T>,
    pub inv: f64,
    pub probs: Vec<T>,
    pub selected: Vec<usize>,
    pub gates: Vec<T>,
    /// Evaluated selected experts (all `k` when tracing, else the active prefix).
    pub experts: Vec<FfnState<T>>,
    pub shared: Vec<FfnState<T>>,
    pub shared_sum: Vec<T>,
    pub h: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnState<T> {
    /// Block input rows, `T × d`.
    pub x: Vec<T>,
    pub xn: Vec<T>,
    pub inv: Vec<f64>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Per head, row `i` holds the `i + 1` causal attention weights.
    pub probs: Vec<Vec<Vec<T>>>,
    /// Concatenated head outputs before `wo`, `T × d`.
    pub ctx: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerPass<T> {
    pub attn: AttnState<T>,
    pub moe: Vec<MoeState<T>>,
}

/// Complete record of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Pass<T> {
    pub tokens: Vec<u32>,
    pub active_k: usize,
    pub layers: Vec<LayerPass<T>>,
    pub final_x: Vec<T>,
    pub final_n: Vec<T>,
    pub final_inv: Vec<f64>,
    pub logits: Vec<T>,
}

impl<T: Real> Pass<T> {
    pub fn logits_tensor(&self, vocab: usize) -> Tensor<T> {
        Tensor::new(vec![self.tokens.len(), vocab], self.logits.clone()).expect("logits shape")
    }

    pub fn to_trace(&self) -> Trace<T> {
        let d = self.final_n.len() / self.tokens.len().max(1);
        Trace {
            tokens: self.tokens.clone(),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, lp)| LayerTrace {
                    layer: l,
                    active_k: self.active_k,
                    tokens: lp.moe.iter().map(|m| m.to_routing(d)).collect(),
                })
                .collect(),
        }
    }
}

impl<T: Real> MoeState<T> {
    fn to_routing(&self, d: usize) -> TokenRouting<T> {
        TokenRouting {
            u: Tensor::vector(self.u.clone()),
            probs: Tensor::vector(self.probs.clone()),
            selected: self.selected.clone(),
            gates: self.gates.clone(),
            expert_outputs: self
                .experts
                .iter()
                .map(|e| Tensor::vector(e.out.clone()))
                .collect(),
            shared_output: if self.shared_sum.is_empty() {
                Tensor::zeros(&[d])
            } else {
                Tensor::vector(self.shared_sum.clone())
            },
            h: Tensor::vector(self.h.clone()),
        }
    }
}

/// Router probabilities `softmax(x · w_route)` over all routed experts.
pub fn route<T: Real>(x: &Tensor<T>, router: &RouterWeights<T>) -> Result<Tensor<T>> {
    let w = &router.w_route;
    if w.shape().len() != 2 || w.shape()[0] != x.len() {
        return Err(Error::Dimension {
            op: "route",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let logits = vec_mat(x.data(), w.data(), w.shape()[1]);
    Ok(Tensor::vector(softmax_slice(&logits)))
}

/// `Σ gate_j · out_j + shared + u`, accumulated in `f64` in rank order.
///
/// This is the one place the MoE output is assembled; the lens reuses it so
/// full-subset reconstructions match the forward pass exactly.
pub fn combine_expert_outputs<T: Real>(
    gates: &[T],
    outputs: &[&[T]],
    shared: &[T],
    u: &[T],
) -> Vec<T> {
    let mut acc = vec![0.0f64; u.len()];
    for (g, out) in gates.iter().zip(outputs) {
        let g = g.as_f64();
        for (a, &o) in acc.iter_mut().zip(out.iter()) {
            *a += g * o.as_f64();
        }
    }
    if !shared.is_empty() {
        for (a, &s) in acc.iter_mut().zip(shared) {
            *a += s.as_f64();
        }
    }
    acc.iter()
        .zip(u)
        .map(|(&a, &x)| T::from_f64(a + x.as_f64()))
        .collect()
}

pub(crate) fn ffn_forward<T: Real>(x: &[T], ex: &ExpertWeights<T>) -> FfnState<T> {
    let hidden = ex.w_in.shape()[1];
    let d = ex.w_out.shape()[1];
    let pre = vec_mat(x, ex.w_in.data(), hidden);
    let act: Vec<T> = pre.iter().map(|&z| T::from_f64(silu(z.as_f64()))).collect();
    let out = vec_mat(&act, ex.w_out.data(), d);
    FfnState { pre, act, out }
}

fn check_k_override(config: &ModelConfig, k_override: Option<usize>) -> Result<usize> {
    match k_override {
        None => Ok(config.top_k),
        Some(k) if k >= 1 && k <= config.top_k => Ok(k),
        Some(k) => Err(Error::param(format!(
            "k_override = {k} outside 1..={}",
            config.top_k
        ))),
    }
}

pub(crate) fn moe_token<T: Real>(
    u: &[T],
    layer: &LayerWeights<T>,
    config: &ModelConfig,
    layer_index: usize,
    active_k: usize,
    evaluate_all: bool,
) -> MoeState<T> {
    let n = config.n_routed_experts;
    let (un, inv) = rms_norm_slice(u, layer.moe_gain.data());
    let mut logits = vec_mat(&un, layer.router.w_route.data(), n);
    let pruned = config.expert_keep.is_some();
    if pruned && config.prune_renormalize {
        for (e, z) in logits.iter_mut().enumerate() {
            if !config.expert_kept(layer_index, e) {
                *z = T::neg_infinity();
            }
        }
    }
    let probs = softmax_slice(&logits);
    let selected = if pruned {
        let scores: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(e, &p)| {
                if config.expert_kept(layer_index, e) {
                    p
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        top_k_indices(&scores, config.top_k)
    } else {
        top_k_indices(&probs, config.top_k)
    }
    .expect("top_k validated by config");
    let mut gates: Vec<T> = selected.iter().map(|&e| probs[e]).collect();
    if config.renormalize_gates {
        let s: f64 = gates.iter().map(|g| g.as_f64()).sum();
        gates
            .iter_mut()
            .for_each(|g| *g = T::from_f64(g.as_f64() / s));
    }
    let n_eval = if evaluate_all { config.top_k } else { active_k };
    let experts: Vec<FfnState<T>> = selected[..n_eval]
        .iter()
        .map(|&e| {
            let ex = layer.experts[e]
                .as_ref()
                .expect("selected expert was pruned");
            ffn_forward(&un, ex)
        })
        .collect();
    let shared: Vec<FfnState<T>> = layer.shared.iter().map(|ex| ffn_forward(&un, ex)).collect();
    let shared_sum: Vec<T> = if shared.is_empty() {
        Vec::new()
    } else {
        (0..u.len())
            .map(|i| T::from_f64(shared.iter().map(|s| s.out[i].as_f64()).sum()))
            .collect()
    };
    let outs: Vec<&[T]> = experts[..active_k]
        .iter()
        .map(|e| e.out.as_slice())
        .collect();
    let h = combine_expert_outputs(&gates[..active_k], &outs, &shared_sum, u);
    MoeState {
        u: u.to_vec(),
        un,
        inv,
        probs,
        selected,
        gates,
        experts,
        shared,
        shared_sum,
        h,
    }
}

/// One MoE block applied to a single post-attention residual vector.
///
/// `k_override` keeps only the leading experts of the original top-k
/// ordering; the returned record still lists the full selection.
pub fn moe_layer_forward<T: Real>(
    u: &Tensor<T>,
    layer: &LayerWeights<T>,
    config: &ModelConfig,
    layer_index: usize,
    k_override: Option<usize>,
) -> Result<(Tensor<T>, TokenRouting<T>)> {
    let active = check_k_override(config, k_override)?;
    if u.len() != config.d_model {
        return Err(Error::Dimension {
            op: "moe_layer_forward",
            left: u.shape().to_vec(),
            right: vec![config.d_model],
        });
    }
    let state = moe_token(u.data(), layer, config, layer_index, active, true);
    let routing = state.to_routing(config.d_model);
    Ok((routing.h.clone(), routing))
}

fn attention_forward<T: Real>(
    x: Vec<T>,
    layer: &LayerWeights<T>,
    config: &ModelConfig,
    seq: usize,
) -> (AttnState<T>, Vec<T>) {
    let d = config.d_model;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut xn = Vec::with_capacity(seq * d);
    let mut inv = Vec::with_capacity(seq);
    for t in 0..seq {
        let (y, r) = rms_norm_slice(&x[t * d..(t + 1) * d], layer.attn_gain.data());
        xn.extend(y);
        inv.push(r);
    }
    let q = matmul_slices(&xn, layer.attn.wq.data(), seq, d, d);
    let k = matmul_slices(&xn, layer.attn.wk.data(), seq, d, d);
    let v = matmul_slices(&xn, layer.attn.wv.data(), seq, d, d);
    let mut ctx = vec![T::zero(); seq * d];
    let mut probs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut head = Vec::with_capacity(seq);
        for i in 0..seq {
            let qi = &q[i * d + cols.start..i * d + cols.end];
            let scores: Vec<T> = (0..=i)
                .map(|j| {
                    let kj = &k[j * d + cols.start..j * d + cols.end];
                    T::from_f64(crate::tensor::dot_f64(qi, kj) * scale)
                })
                .collect();
            let a = softmax_slice(&scores);
            for c in cols.clone() {
                let s: f64 = (0..=i).map(|j| a[j].as_f64() * v[j * d + c].as_f64()).sum();
                ctx[i * d + c] = T::from_f64(s);
            }
            head.push(a);
        }
        probs.push(head);
    }
    let proj = matmul_slices(&ctx, layer.attn.wo.data(), seq, d, d);
    let u: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
    (
        AttnState {
            x,
            xn,
            inv,
            q,
            k,
            v,
            probs,
            ctx,
        },
        u,
    )
}

pub(crate) fn validate_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Runs the model and keeps every intermediate needed for tracing or backprop.
pub(crate) fn run<T: Real>(
    ckpt: &Checkpoint<T>,
    tokens: &[u32],
    k_override: Option<usize>,
    evaluate_all: bool,
) -> Result<Pass<T>> {
    let config = &ckpt.config;
    validate_tokens(config, tokens)?;
    let active_k = check_k_override(config, k_override)?;
    let d = config.d_model;
    let seq = tokens.len();
    let mut x = Vec::with_capacity(seq * d);
    for (t, &tok) in tokens.iter().enumerate() {
        let e = ckpt.token_embedding.row(tok as usize);
        let p = ckpt.position_embedding.row(t);
        x.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
    }
    let mut layers = Vec::with_capacity(config.n_layers);
    for (l, lw) in ckpt.layers.iter().enumerate() {
        let (attn, u) = attention_forward(x, lw, config, seq);
        let moe: Vec<MoeState<T>> = (0..seq)
            .map(|t| {
                moe_token(
                    &u[t * d..(t + 1) * d],
                    lw,
                    config,
                    l,
                    active_k,
                    evaluate_all,
                )
            })
            .collect();
        x = moe.iter().flat_map(|m| m.h.iter().copied()).collect();
        layers.push(LayerPass { attn, moe });
    }
    let mut final_n = Vec::with_capacity(seq * d);
    let mut final_inv = Vec::with_capacity(seq);
    for t in 0..seq {
        let (y, r) = rms_norm_slice(&x[t * d..(t + 1) * d], ckpt.final_gain.data());
        final_n.extend(y);
        final_inv.push(r);
    }
    let logits = matmul_slices(&final_n, ckpt.unembed.data(), seq, d, config.vocab_size);
    Ok(Pass {
        tokens: tokens.to_vec(),
        active_k,
        layers,
        final_x: x,
        final_n,
        final_inv,
        logits,
    })
}

/// Causal next-token logits `seq × vocab`, plus a full trace when requested.
pub fn model_forward<T: Real>(
    ckpt: &Checkpoint<T>,
    tokens: &[u32],
    trace: bool,
    k_override: Option<usize>,
) -> Result<(Tensor<T>, Option<Trace<T>>)> {
    let pass = run(ckpt, tokens, k_override, trace)?;
    let logits = pass.logits_tensor(ckpt.config.vocab_size);
    let trace = trace.then(|| pass.to_trace());
    Ok((logits, trace))
}
