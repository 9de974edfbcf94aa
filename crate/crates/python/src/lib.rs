// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: models, traces, the lens and the analyses.

use std::collections::BTreeMap;

use moelens::analysis::{self, SpecializationCounter};
use moelens::lens::{lens_grid_with, LensOptions};
use moelens::trainer::{self, TrainConfig};
use moelens::{Checkpoint, Error, ModelConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A mixture-of-experts language model.
#[pyclass(name = "Model", module = "moelens_py", frozen)]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// Seeded initialization from a JSON model config (missing keys take defaults).
    #[staticmethod]
    #[pyo3(signature = (config_json = "{}"))]
    fn init(config_json: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(json_err)?;
        Ok(Self {
            inner: Checkpoint::init(&cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: moelens::load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        moelens::save_checkpoint(&self.inner, path).map_err(py_err)
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Next-token logits, one row per position.
    #[pyo3(signature = (tokens, k = None))]
    fn forward(&self, tokens: Vec<u32>, k: Option<usize>) -> PyResult<Vec<Vec<f32>>> {
        let (logits, _) = moelens::model_forward(&self.inner, &tokens, false, k).map_err(py_err)?;
        Ok((0..logits.rows()).map(|i| logits.row(i).to_vec()).collect())
    }

    fn trace(&self, tokens: Vec<u32>) -> PyResult<PyTrace> {
        let (_, trace) =
            moelens::model_forward(&self.inner, &tokens, true, None).map_err(py_err)?;
        Ok(PyTrace {
            inner: trace.expect("trace requested"),
        })
    }

    #[pyo3(signature = (tokens, k = None))]
    fn perplexity(&self, tokens: Vec<u32>, k: Option<usize>) -> PyResult<f64> {
        analysis::perplexity(&self.inner, &tokens, k).map_err(py_err)
    }

    /// Keeps only the listed routed experts of each layer.
    #[pyo3(signature = (keep, renormalize = false))]
    fn prune(&self, keep: Vec<Vec<usize>>, renormalize: bool) -> PyResult<Self> {
        Ok(Self {
            inner: analysis::prune_experts_with(&self.inner, &keep, renormalize).map_err(py_err)?,
        })
    }

    /// Lens grid at `position` (default: last token) as JSON.
    #[pyo3(signature = (tokens, position = None, exclude_shared = false))]
    fn lens_grid(
        &self,
        tokens: Vec<u32>,
        position: Option<usize>,
        exclude_shared: bool,
    ) -> PyResult<String> {
        let (_, trace) =
            moelens::model_forward(&self.inner, &tokens, true, None).map_err(py_err)?;
        let pos = position.unwrap_or(tokens.len().saturating_sub(1));
        let grid = lens_grid_with(
            &trace.expect("trace requested"),
            &self.inner,
            pos,
            LensOptions { exclude_shared },
        )
        .map_err(py_err)?;
        Ok(grid.to_json())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(layers={}, d_model={}, experts={}, top_k={}, parameters={})",
            c.n_layers,
            c.d_model,
            c.n_routed_experts,
            c.top_k,
            self.inner.parameter_count()
        )
    }
}

/// Routing decisions and hidden states recorded during a forward pass.
#[pyclass(name = "Trace", module = "moelens_py", frozen)]
struct PyTrace {
    inner: moelens::Trace,
}

impl PyTrace {
    fn layer(&self, layer: usize) -> PyResult<&moelens::LayerTrace> {
        self.inner
            .layers
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))
    }
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.layers.len()
    }

    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.inner.tokens.clone()
    }

    /// Selected experts per position, in rank order.
    fn selected(&self, layer: usize) -> PyResult<Vec<Vec<usize>>> {
        Ok(self
            .layer(layer)?
            .tokens
            .iter()
            .map(|t| t.selected.clone())
            .collect())
    }

    fn gates(&self, layer: usize) -> PyResult<Vec<Vec<f32>>> {
        Ok(self
            .layer(layer)?
            .tokens
            .iter()
            .map(|t| t.gates.clone())
            .collect())
    }

    fn router_probs(&self, layer: usize) -> PyResult<Vec<Vec<f32>>> {
        Ok(self
            .layer(layer)?
            .tokens
            .iter()
            .map(|t| t.probs.data().to_vec())
            .collect())
    }

    fn hidden(&self, layer: usize) -> PyResult<Vec<Vec<f32>>> {
        Ok(self
            .layer(layer)?
            .tokens
            .iter()
            .map(|t| t.h.data().to_vec())
            .collect())
    }

    /// Layer output rebuilt from the top `k_prime` experts only.
    fn restricted_hidden(
        &self,
        layer: usize,
        k_prime: usize,
        position: usize,
    ) -> PyResult<Vec<f32>> {
        let r = moelens::lens::restricted_hidden(&self.inner, layer, k_prime, position)
            .map_err(py_err)?;
        Ok(r.vector.into_data())
    }
}

/// Deterministic synthetic corpus for domain "A", "B" or "C".
#[pyfunction]
fn synth_corpus(domain: &str, length: usize, seed: u64) -> PyResult<Vec<u32>> {
    Ok(trainer::synth_corpus(domain, length, seed)
        .map_err(py_err)?
        .tokens)
}

/// Trains `model` on the given domains; returns the model and per-step cross entropy.
#[pyfunction]
#[pyo3(signature = (model, domains, length = 100_000, seed = 1, train_json = "{}"))]
fn train(
    model: &PyModel,
    domains: Vec<String>,
    length: usize,
    seed: u64,
    train_json: &str,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg: TrainConfig = serde_json::from_str(train_json).map_err(json_err)?;
    let corpora = domains
        .iter()
        .map(|d| trainer::synth_corpus(d, length, seed))
        .collect::<moelens::Result<Vec<_>>>()
        .map_err(py_err)?;
    let out = trainer::train(&model.inner, &corpora, &cfg).map_err(py_err)?;
    let losses = out.history.iter().map(|r| r.cross_entropy).collect();
    Ok((
        PyModel {
            inner: out.checkpoint,
        },
        losses,
    ))
}

fn traces_for(model: &Checkpoint, tokens: &[u32]) -> PyResult<Vec<moelens::Trace>> {
    moelens::cli::trace_chunks(model, tokens).map_err(py_err)
}

/// Fraction of tokens routed to each expert, per domain, as CSV.
#[pyfunction]
fn specialization_csv(model: &PyModel, corpora: BTreeMap<String, Vec<u32>>) -> PyResult<String> {
    let c = &model.inner.config;
    let domains: Vec<String> = corpora.keys().cloned().collect();
    let mut counter = SpecializationCounter::new(&domains, c.n_layers, c.n_routed_experts, c.top_k);
    for (i, tokens) in corpora.values().enumerate() {
        for t in traces_for(&model.inner, tokens)? {
            counter.add(i, &t).map_err(py_err)?;
        }
    }
    Ok(counter.finish().map_err(py_err)?.to_csv())
}

/// Per-layer mean and std of cosine(top-`k_prime` state, full state).
#[pyfunction]
#[pyo3(signature = (model, tokens, k_prime = 1))]
fn similarity_profile(
    model: &PyModel,
    tokens: Vec<u32>,
    k_prime: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let traces = traces_for(&model.inner, &tokens)?;
    let p = analysis::similarity_profile_at(&traces, "", k_prime).map_err(py_err)?;
    Ok((p.mean_cos, p.std_cos))
}

#[pymodule]
fn moelens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(specialization_csv, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_profile, m)?)?;
    Ok(())
}
