// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients for [`super::forward::run`].
//!
//! Top-k selections are treated as constants: gradients reach the router
//! only through the probabilities of the selected experts (and through the
//! balance term, which touches every probability).

use crate::model::forward::{AttnState, FfnState, MoeState, Pass};
use crate::model::weights::{Checkpoint, ExpertWeights, LayerWeights};
use crate::tensor::{
    dot_f64, dot_native, outer_acc, rms_norm_backward, silu_grad, softmax_backward, transpose,
    vec_mat_t, Real,
};

fn ffn_backward<T: Real>(
    x: &[T],
    st: &FfnState<T>,
    // Transposed weights.
    ex: &ExpertWeights<T>,
    grad: &mut ExpertWeights<T>,
    d_out: &[T],
    dx: &mut [T],
) {
    let hidden = st.pre.len();
    outer_acc(grad.w_out.data_mut(), &st.act, d_out);
    let dact = vec_mat_t(d_out, ex.w_out.data(), hidden);
    let dpre: Vec<T> = dact
        .iter()
        .zip(&st.pre)
        .map(|(&a, &z)| T::from_f64(a.as_f64() * silu_grad(z.as_f64())))
        .collect();
    outer_acc(grad.w_in.data_mut(), x, &dpre);
    let dxi = vec_mat_t(&dpre, ex.w_in.data(), x.len());
    for (a, b) in dx.iter_mut().zip(dxi) {
        *a += b;
    }
}

/// Backward through one token's MoE block; returns `dL/du`.
#[allow(clippy::too_many_arguments)]
fn moe_backward<T: Real>(
    st: &MoeState<T>,
    lw: &LayerWeights<T>,
    lt: &LayerWeights<T>,
    grad: &mut LayerWeights<T>,
    renormalize_gates: bool,
    active_k: usize,
    dh: &[T],
    dprobs_extra: Option<&[f64]>,
) -> Vec<T> {
    let d = dh.len();
    let n = st.probs.len();
    let mut dun = vec![T::zero(); d];

    for ((s, ex), g) in st.shared.iter().zip(&lt.shared).zip(grad.shared.iter_mut()) {
        ffn_backward(&st.un, s, ex, g, dh, &mut dun);
    }

    let mut dgates = vec![0.0f64; active_k];
    for (j, dg) in dgates.iter_mut().enumerate() {
        let e = st.selected[j];
        let fs = &st.experts[j];
        *dg = dot_f64(dh, &fs.out);
        let gate = st.gates[j];
        let d_out: Vec<T> = dh.iter().map(|&v| v * gate).collect();
        let ex = lt.experts[e].as_ref().expect("selected expert exists");
        let gx = grad.experts[e].as_mut().expect("gradient slot exists");
        ffn_backward(&st.un, fs, ex, gx, &d_out, &mut dun);
    }

    let mut dprobs: Vec<f64> = match dprobs_extra {
        Some(extra) => extra.to_vec(),
        None => vec![0.0; n],
    };
    if renormalize_gates {
        let sum: f64 = st.selected.iter().map(|&e| st.probs[e].as_f64()).sum();
        let weighted: f64 = (0..active_k)
            .map(|j| dgates[j] * st.gates[j].as_f64())
            .sum();
        for (m, &e) in st.selected.iter().enumerate() {
            let direct = if m < active_k { dgates[m] } else { 0.0 };
            dprobs[e] += (direct - weighted) / sum;
        }
    } else {
        for j in 0..active_k {
            dprobs[st.selected[j]] += dgates[j];
        }
    }

    let dprobs_t: Vec<T> = dprobs.iter().map(|&v| T::from_f64(v)).collect();
    let dlogits = softmax_backward(&st.probs, &dprobs_t);
    outer_acc(grad.router.w_route.data_mut(), &st.un, &dlogits);
    let dr = vec_mat_t(&dlogits, lt.router.w_route.data(), d);
    for (a, b) in dun.iter_mut().zip(dr) {
        *a += b;
    }

    let du_norm = rms_norm_backward(
        &st.u,
        lw.moe_gain.data(),
        st.inv,
        &dun,
        grad.moe_gain.data_mut(),
    );
    dh.iter().zip(du_norm).map(|(&a, b)| a + b).collect()
}

/// Backward through attention plus its residual; `du` is `T × d`.
fn attention_backward<T: Real>(
    st: &AttnState<T>,
    lw: &LayerWeights<T>,
    lt: &LayerWeights<T>,
    grad: &mut LayerWeights<T>,
    n_heads: usize,
    du: &[T],
) -> Vec<T> {
    let d = lw.attn_gain.len();
    let seq = st.inv.len();
    let dh_ = d / n_heads;
    let scale = 1.0 / (dh_ as f64).sqrt();

    let mut dctx = Vec::with_capacity(seq * d);
    for t in 0..seq {
        let row = &du[t * d..(t + 1) * d];
        outer_acc(grad.attn.wo.data_mut(), &st.ctx[t * d..(t + 1) * d], row);
        dctx.extend(vec_mat_t(row, lt.attn.wo.data(), d));
    }

    let mut dq = vec![0.0f64; seq * d];
    let mut dk = vec![0.0f64; seq * d];
    let mut dv = vec![0.0f64; seq * d];
    for h in 0..n_heads {
        let c0 = h * dh_;
        for i in 0..seq {
            let a = &st.probs[h][i];
            let dci = &dctx[i * d + c0..i * d + c0 + dh_];
            let mut da = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let vj = &st.v[j * d + c0..j * d + c0 + dh_];
                da.push(dot_native(dci, vj));
                let aij = a[j].as_f64();
                for c in 0..dh_ {
                    dv[j * d + c0 + c] += aij * dci[c].as_f64();
                }
            }
            let ds = softmax_backward(a, &da);
            for j in 0..=i {
                let s = ds[j].as_f64() * scale;
                if s == 0.0 {
                    continue;
                }
                for c in 0..dh_ {
                    dq[i * d + c0 + c] += s * st.k[j * d + c0 + c].as_f64();
                    dk[j * d + c0 + c] += s * st.q[i * d + c0 + c].as_f64();
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| -> Vec<T> { v.into_iter().map(T::from_f64).collect() };
    let (dq, dk, dv) = (to_t(dq), to_t(dk), to_t(dv));

    let mut dx = Vec::with_capacity(seq * d);
    for t in 0..seq {
        let r = t * d..(t + 1) * d;
        let xn = &st.xn[r.clone()];
        outer_acc(grad.attn.wq.data_mut(), xn, &dq[r.clone()]);
        outer_acc(grad.attn.wk.data_mut(), xn, &dk[r.clone()]);
        outer_acc(grad.attn.wv.data_mut(), xn, &dv[r.clone()]);
        let a = vec_mat_t(&dq[r.clone()], lt.attn.wq.data(), d);
        let b = vec_mat_t(&dk[r.clone()], lt.attn.wk.data(), d);
        let c = vec_mat_t(&dv[r.clone()], lt.attn.wv.data(), d);
        let dxn: Vec<T> = (0..d).map(|i| a[i] + b[i] + c[i]).collect();
        let dnorm = rms_norm_backward(
            &st.x[r.clone()],
            lw.attn_gain.data(),
            st.inv[t],
            &dxn,
            grad.attn_gain.data_mut(),
        );
        dx.extend(du[r].iter().zip(dnorm).map(|(&a, b)| a + b));
    }
    dx
}

/// Copy of `ckpt` with every matrix transposed, for the `dy · Wᵀ` products.
pub(crate) fn transposed<T: Real>(ckpt: &Checkpoint<T>) -> Checkpoint<T> {
    let mut out = ckpt.clone();
    for t in out.tensors_mut() {
        *t = transpose(t);
    }
    out
}

/// Accumulates parameter gradients of one pass into `grads`.
///
/// `wt` is [`transposed`] of `ckpt`. `dlogits` is `dL/dlogits` (`seq × vocab`). `dprobs_per_layer[l]`, when
/// given, is a gradient on layer `l`'s router probabilities applied
/// identically at every position.
pub(crate) fn backward<T: Real>(
    ckpt: &Checkpoint<T>,
    wt: &Checkpoint<T>,
    pass: &Pass<T>,
    dlogits: &[T],
    dprobs_per_layer: Option<&[Vec<f64>]>,
    grads: &mut Checkpoint<T>,
) {
    let config = &ckpt.config;
    let d = config.d_model;
    let vocab = config.vocab_size;
    let seq = pass.tokens.len();

    let mut dx = Vec::with_capacity(seq * d);
    for t in 0..seq {
        let dl = &dlogits[t * vocab..(t + 1) * vocab];
        let xn = &pass.final_n[t * d..(t + 1) * d];
        outer_acc(grads.unembed.data_mut(), xn, dl);
        let dxn = vec_mat_t(dl, wt.unembed.data(), d);
        dx.extend(rms_norm_backward(
            &pass.final_x[t * d..(t + 1) * d],
            ckpt.final_gain.data(),
            pass.final_inv[t],
            &dxn,
            grads.final_gain.data_mut(),
        ));
    }

    for l in (0..config.n_layers).rev() {
        let lp = &pass.layers[l];
        let lw = &ckpt.layers[l];
        let lt = &wt.layers[l];
        let gl = &mut grads.layers[l];
        let extra = dprobs_per_layer.map(|v| v[l].as_slice());
        let mut du = Vec::with_capacity(seq * d);
        for t in 0..seq {
            du.extend(moe_backward(
                &lp.moe[t],
                lw,
                lt,
                gl,
                config.renormalize_gates,
                pass.active_k,
                &dx[t * d..(t + 1) * d],
                extra,
            ));
        }
        dx = attention_backward(&lp.attn, lw, lt, gl, config.n_heads, &du);
    }

    for (t, &tok) in pass.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        crate::tensor::add_into(grads.token_embedding.row_mut(tok as usize), row);
        crate::tensor::add_into(grads.position_embedding.row_mut(t), row);
    }
}
