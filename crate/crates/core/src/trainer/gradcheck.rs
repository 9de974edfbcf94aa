// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic-versus-central-difference gradient comparison in `f64`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::weights::Checkpoint;
use crate::prng::Prng;
use crate::trainer::train::evaluate_batch;

pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
    /// Draws discarded because the perturbation changed a top-k selection.
    pub skipped_boundary: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub balance_coeff: f64,
    pub seed: u64,
    /// Only tensors whose name passes this filter are sampled.
    pub tensor_filter: Option<fn(&str) -> bool>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            balance_coeff: 0.01,
            seed: 0,
            tensor_filter: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|)`, or 0 when both are below 1e-10.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Analytic gradients of the training loss, in `f64`, for a batch of windows.
pub fn analytic_gradients(
    ckpt: &Checkpoint,
    batch: &[Vec<u32>],
    balance_coeff: f64,
) -> Result<Checkpoint<f64>> {
    let c64 = ckpt.cast::<f64>();
    Ok(evaluate_batch(&c64, batch, balance_coeff, true)?
        .grads
        .expect("gradients requested"))
}

/// Samples parameters uniformly by tensor, then by element, and compares the
/// analytic gradient with a central difference of step [`FD_STEP`].
///
/// Draws where either perturbed evaluation routes some token differently are
/// discarded and redrawn: the loss is not differentiable across a top-k
/// boundary.
pub fn grad_check(
    ckpt: &Checkpoint,
    batch: &[Vec<u32>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = ckpt.parameter_count();
    if params > 5_000 {
        return Err(Error::param(format!(
            "gradient check is limited to 5k parameters, model has {params}"
        )));
    }
    let mut model = ckpt.cast::<f64>();
    let base = evaluate_batch(&model, batch, opts.balance_coeff, true)?;
    let grads = base.grads.expect("gradients requested");
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let candidates: Vec<usize> = (0..names.len())
        .filter(|&i| opts.tensor_filter.is_none_or(|f| f(&names[i])))
        .collect();
    if candidates.is_empty() {
        return Err(Error::param("tensor filter matched nothing"));
    }
    let grad_tensors = grads.named_tensors();

    let mut rng = Prng::new(opts.seed);
    let mut samples = Vec::with_capacity(opts.samples);
    let mut skipped = 0;
    let max_draws = opts.samples * 20;
    let mut draws = 0;
    while samples.len() < opts.samples && draws < max_draws {
        draws += 1;
        let ti = candidates[rng.below(candidates.len())];
        let len = grad_tensors[ti].1.len();
        let idx = rng.below(len);
        let analytic = grad_tensors[ti].1.data()[idx];

        let orig = model.tensors_mut()[ti].data()[idx];
        model.tensors_mut()[ti].data_mut()[idx] = orig + FD_STEP;
        let plus = evaluate_batch(&model, batch, opts.balance_coeff, false)?;
        model.tensors_mut()[ti].data_mut()[idx] = orig - FD_STEP;
        let minus = evaluate_batch(&model, batch, opts.balance_coeff, false)?;
        model.tensors_mut()[ti].data_mut()[idx] = orig;

        if plus.selections != base.selections || minus.selections != base.selections {
            skipped += 1;
            continue;
        }
        let numeric =
            (plus.total(opts.balance_coeff) - minus.total(opts.balance_coeff)) / (2.0 * FD_STEP);
        samples.push(GradSample {
            tensor: names[ti].clone(),
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    if samples.len() < opts.samples {
        return Err(Error::param(format!(
            "only {} of {} samples avoided top-k boundaries",
            samples.len(),
            opts.samples
        )));
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        samples,
        skipped_boundary: skipped,
    })
}
