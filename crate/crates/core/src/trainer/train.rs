// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::backward::{backward, transposed};
use crate::model::forward::{run, Pass};
use crate::model::weights::Checkpoint;
use crate::prng::Prng;
use crate::tensor::Real;
use crate::trainer::corpus::DomainCorpus;
use crate::trainer::loss::{balance_loss, cross_entropy_with_grad, RoutingStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Weight of the expert-level balance loss.
    pub balance_coeff: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 2000,
            batch_size: 8,
            seq_len: 32,
            balance_coeff: 0.01,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::param("batch_size and seq_len must be positive"));
        }
        if !(self.balance_coeff.is_finite() && self.balance_coeff >= 0.0) {
            return Err(Error::param("balance_coeff must be >= 0"));
        }
        Ok(())
    }
}

/// Loss values observed at one step, before that step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub cross_entropy: f64,
    /// Mean over layers of the unscaled balance loss.
    pub balance_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<TrainRecord>,
}

/// Loss and gradients for a batch of windows (each `input ++ [last target]`).
pub(crate) struct BatchEval<T: Real> {
    pub cross_entropy: f64,
    pub balance: f64,
    pub grads: Option<Checkpoint<T>>,
    /// Top-k selections of every token at every layer, for boundary checks.
    pub selections: Vec<usize>,
}

impl<T: Real> BatchEval<T> {
    pub fn total(&self, balance_coeff: f64) -> f64 {
        self.cross_entropy + balance_coeff * self.balance
    }
}

/// Total loss is `cross_entropy + α · mean_l balance_l`, with cross-entropy
/// averaged over every predicted position in the batch and the balance
/// statistics pooled over every token in the batch.
pub(crate) fn evaluate_batch<T: Real>(
    ckpt: &Checkpoint<T>,
    windows: &[Vec<u32>],
    balance_coeff: f64,
    want_grads: bool,
) -> Result<BatchEval<T>> {
    let cfg = &ckpt.config;
    let vocab = cfg.vocab_size;
    let n_layers = cfg.n_layers;
    let n = cfg.n_routed_experts;
    let positions: usize = windows.iter().map(|w| w.len().saturating_sub(1)).sum();
    if positions == 0 {
        return Err(Error::Input("batch has no prediction targets".into()));
    }
    let passes: Vec<Pass<T>> = windows
        .iter()
        .map(|w| run(ckpt, &w[..w.len() - 1], None, false))
        .collect::<Result<_>>()?;

    let mut stats: Vec<RoutingStats> = (0..n_layers)
        .map(|_| RoutingStats::new(n, cfg.top_k))
        .collect();
    let mut selections = Vec::new();
    for p in &passes {
        for (l, lp) in p.layers.iter().enumerate() {
            for m in &lp.moe {
                stats[l].push(&m.probs, &m.selected);
                selections.extend_from_slice(&m.selected);
            }
        }
    }
    let mut balance = 0.0;
    for s in &stats {
        balance += balance_loss(s)?;
    }
    balance /= n_layers as f64;

    let scale = 1.0 / positions as f64;
    let mut ce_total = 0.0;
    let mut dlogits = Vec::with_capacity(passes.len());
    for (p, w) in passes.iter().zip(windows) {
        let (loss, g) = cross_entropy_with_grad(&p.logits, vocab, &w[1..], scale);
        ce_total += loss;
        dlogits.push(g);
    }
    let cross_entropy = ce_total * scale;

    let grads = if want_grads {
        // d(α · mean_l n Σ_i f_i P_i)/d p_{t,i} = α/L · n · f_i / N
        let dprobs: Vec<Vec<f64>> = stats
            .iter()
            .map(|s| {
                let c = balance_coeff / n_layers as f64 * n as f64 / s.tokens as f64;
                s.load_fractions().iter().map(|f| c * f).collect()
            })
            .collect();
        let use_balance = balance_coeff > 0.0;
        let mut grads = ckpt.zeros_like();
        let wt = transposed(ckpt);
        for (p, dl) in passes.iter().zip(&dlogits) {
            backward(
                ckpt,
                &wt,
                p,
                dl,
                use_balance.then_some(dprobs.as_slice()),
                &mut grads,
            );
        }
        Some(grads)
    } else {
        None
    };
    Ok(BatchEval {
        cross_entropy,
        balance,
        grads,
        selections,
    })
}

/// Draws one batch; domains take turns in round-robin order.
fn sample_batch(
    corpora: &[DomainCorpus],
    step: usize,
    cfg: &TrainConfig,
    rng: &mut Prng,
) -> Vec<Vec<u32>> {
    (0..cfg.batch_size)
        .map(|i| {
            let c = &corpora[(step * cfg.batch_size + i) % corpora.len()];
            let span = cfg.seq_len + 1;
            let start = rng.below(c.tokens.len() - span + 1);
            c.tokens[start..start + span].to_vec()
        })
        .collect()
}

/// Plain SGD on cross-entropy plus `α ·` balance loss.
pub fn train(
    ckpt: &Checkpoint,
    corpora: &[DomainCorpus],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(ckpt, corpora, cfg, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with_progress(
    ckpt: &Checkpoint,
    corpora: &[DomainCorpus],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpora.is_empty() {
        return Err(Error::param("training needs at least one corpus"));
    }
    if cfg.seq_len > ckpt.config.max_seq_len {
        return Err(Error::param(format!(
            "seq_len {} exceeds max_seq_len {}",
            cfg.seq_len, ckpt.config.max_seq_len
        )));
    }
    for c in corpora {
        if c.tokens.len() < cfg.seq_len + 1 {
            return Err(Error::param(format!(
                "corpus {} has {} tokens, fewer than seq_len + 1",
                c.domain,
                c.tokens.len()
            )));
        }
    }
    let mut model = ckpt.clone();
    let mut rng = Prng::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let lr = cfg.learning_rate as f32;
    for step in 0..cfg.steps {
        let batch = sample_batch(corpora, step, cfg, &mut rng);
        let eval = evaluate_batch(&model, &batch, cfg.balance_coeff, true)?;
        let total = eval.total(cfg.balance_coeff);
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        let grads = eval.grads.expect("gradients requested");
        for (w, g) in model.tensors_mut().into_iter().zip(grads.named_tensors()) {
            for (wv, gv) in w.data_mut().iter_mut().zip(g.1.data()) {
                *wv -= lr * gv;
            }
        }
        let rec = TrainRecord {
            step,
            cross_entropy: eval.cross_entropy,
            balance_loss: eval.balance,
        };
        progress(&rec);
        history.push(rec);
    }
    if model.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome {
        checkpoint: model,
        history,
    })
}

/// Writes `step,cross_entropy,balance_loss`.
pub fn write_loss_csv(history: &[TrainRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "step,cross_entropy,balance_loss").expect("vec write");
    for r in history {
        writeln!(buf, "{},{},{}", r.step, r.cross_entropy, r.balance_loss).expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
