// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    perplexity_curve, prune_experts_with, prune_plan, similarity_profile, PerplexityCurve,
    SimilarityProfile, SpecializationCounter, SpecializationTable,
};
use crate::cli::config::RunConfig;
use crate::error::{Error, Result};
use crate::lens::{lens_grid_with, LensOptions};
use crate::model::{load_checkpoint, model_forward, save_checkpoint, Checkpoint, Trace};
use crate::report::{lens_grid_svg, perplexity_svg, specialization_svg, write_text};
use crate::trainer::{synth_corpus, train_with_progress, write_loss_csv, DomainCorpus};

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("summary serializes")
}

/// Writes `<out>/<domain>.bytes` for every configured domain.
pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<String> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    for d in &cfg.corpus.domains {
        let c = synth_corpus(d, cfg.corpus.length, cfg.corpus.seed)?;
        let path = c.write_to_dir(out)?;
        eprintln!("wrote {} ({} tokens)", path.display(), c.tokens.len());
        files.push(json!({"domain": d, "path": path, "tokens": c.tokens.len()}));
    }
    Ok(to_json(&json!({ "files": files })))
}

fn training_corpora(cfg: &RunConfig) -> Result<Vec<DomainCorpus>> {
    cfg.domains()
        .into_iter()
        .map(|d| match &cfg.corpus_dir {
            Some(dir) if dir.join(format!("{d}.bytes")).exists() => {
                DomainCorpus::read_from_dir(dir, d)
            }
            _ => synth_corpus(d.label(), cfg.corpus.length, cfg.corpus.seed),
        })
        .collect()
}

/// Loss history is written next to the checkpoint as `<stem>.loss.csv`.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

/// Trains from `cfg.model`'s seeded initialization and writes the result.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<String> {
    // Fail on an unwritable destination before spending time training.
    std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let corpora = training_corpora(cfg)?;
    let init = Checkpoint::init(&cfg.model)?;
    eprintln!(
        "training {} parameters for {} steps",
        init.parameter_count(),
        cfg.train.steps
    );
    let start = Instant::now();
    let outcome = train_with_progress(&init, &corpora, &cfg.train, |r| {
        if r.step % 100 == 0 {
            eprintln!(
                "step {:>5}  ce {:.4}  balance {:.4}  {:.1}s",
                r.step,
                r.cross_entropy,
                r.balance_loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    save_checkpoint(&outcome.checkpoint, out)?;
    let loss_path = loss_csv_path(out);
    write_loss_csv(&outcome.history, &loss_path)?;
    let last = outcome.history.last();
    Ok(to_json(&json!({
        "checkpoint": out,
        "loss_csv": loss_path,
        "steps": outcome.history.len(),
        "parameters": outcome.checkpoint.parameter_count(),
        "final_cross_entropy": last.map(|r| r.cross_entropy),
        "final_balance_loss": last.map(|r| r.balance_loss),
    })))
}

#[derive(Debug, Clone, Serialize)]
pub struct SpecializationHeadline {
    pub layer: usize,
    pub domain: String,
    pub top_expert: usize,
    pub max_fraction: f64,
    /// `max_fraction` as a multiple of the uniform share.
    pub ratio_to_uniform: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LensProbe {
    pub prompt: String,
    pub json: String,
    pub svg: String,
}

/// Headline numbers of one `analyze` run; written as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub n_layers: usize,
    pub n_routed_experts: usize,
    pub top_k: usize,
    pub uniform_baseline: f64,
    pub domains: Vec<String>,
    pub eval_tokens: Vec<usize>,
    pub specialization: Vec<SpecializationHeadline>,
    pub similarity: Vec<SimilarityProfile>,
    pub perplexity: Vec<PerplexityCurve>,
    /// `ppx(k'=1) / ppx(k) - 1` per domain, where available.
    pub top1_ppx_increase: Vec<Option<f64>>,
    /// Reference values observed for a large pretrained model.
    pub full_scale_reference: serde_json::Value,
    pub prune_threshold: f64,
    /// Experts kept per layer under `prune_threshold`, over all domains.
    pub prune_keep: Vec<Vec<usize>>,
    pub lens_probes: Vec<LensProbe>,
}

fn check_model_matches(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let (m, c) = (&ckpt.config, &cfg.model);
    if m.n_routed_experts != c.n_routed_experts || m.top_k != c.top_k || m.n_layers != c.n_layers {
        return Err(Error::Consistency(format!(
            "model has n = {}, k = {}, {} layers; config has n = {}, k = {}, {} layers",
            m.n_routed_experts, m.top_k, m.n_layers, c.n_routed_experts, c.top_k, c.n_layers
        )));
    }
    Ok(())
}

/// Traces `tokens` in consecutive context-sized chunks.
pub fn trace_chunks(ckpt: &Checkpoint, tokens: &[u32]) -> Result<Vec<Trace>> {
    tokens
        .chunks(ckpt.config.max_seq_len)
        .map(|w| {
            Ok(model_forward(ckpt, w, true, None)?
                .1
                .expect("trace requested"))
        })
        .collect()
}

/// Runs every analysis and writes its artifacts under `out`.
pub fn analyze(cfg: &RunConfig, model: &Path, out: &Path) -> Result<String> {
    let ckpt = load_checkpoint(model)?;
    check_model_matches(cfg, &ckpt)?;
    let k = ckpt.config.top_k;
    let [lo, hi] = cfg.k_prime_range();

    let mut counter = SpecializationCounter::new(
        &cfg.corpus.domains,
        ckpt.config.n_layers,
        ckpt.config.n_routed_experts,
        k,
    );
    let mut similarity = Vec::new();
    let mut perplexity = Vec::new();
    let mut eval_tokens = Vec::new();
    for (di, d) in cfg.domains().into_iter().enumerate() {
        let eval = synth_corpus(d.label(), cfg.analysis.eval_tokens, cfg.analysis.eval_seed)?;
        eprintln!("domain {d}: tracing {} tokens", eval.tokens.len());
        let traces = trace_chunks(&ckpt, &eval.tokens)?;
        for t in &traces {
            counter.add(di, t)?;
        }
        similarity.push(similarity_profile(&traces, d.label())?);
        drop(traces);
        eprintln!("domain {d}: perplexity for k' in {lo}..={hi}");
        perplexity.push(perplexity_curve(&ckpt, d.label(), &eval.tokens, lo..=hi)?);
        eval_tokens.push(eval.tokens.len());
    }
    let table = counter.finish()?;

    write_text(&out.join("specialization.csv"), &table.to_csv())?;
    let mut headlines = Vec::new();
    for l in 0..table.n_layers() {
        for (di, d) in table.domains.iter().enumerate() {
            write_text(
                &out.join("specialization").join(format!("layer{l}_{d}.svg")),
                &specialization_svg(&table, l, di),
            )?;
            let (e, f) = table.max_share(l, di);
            headlines.push(SpecializationHeadline {
                layer: l,
                domain: d.clone(),
                top_expert: e,
                max_fraction: f,
                ratio_to_uniform: f / table.uniform_baseline,
            });
        }
    }
    write_text(
        &out.join("similarity.csv"),
        &SimilarityProfile::to_csv(&similarity),
    )?;
    write_text(
        &out.join("perplexity.csv"),
        &PerplexityCurve::to_csv(&perplexity),
    )?;
    write_text(&out.join("perplexity.svg"), &perplexity_svg(&perplexity))?;

    let options = LensOptions {
        exclude_shared: cfg.analysis.lens_exclude_shared,
    };
    let mut lens_probes = Vec::new();
    for (i, prompt) in cfg.analysis.probe_prompts.iter().enumerate() {
        let tokens: Vec<u32> = prompt.bytes().map(u32::from).collect();
        let (_, trace) = model_forward(&ckpt, &tokens, true, None)?;
        let grid = lens_grid_with(
            &trace.expect("trace requested"),
            &ckpt,
            tokens.len() - 1,
            options,
        )?;
        let (json_name, svg_name) = (format!("lens/probe{i}.json"), format!("lens/probe{i}.svg"));
        write_text(&out.join(&json_name), &grid.to_json())?;
        write_text(&out.join(&svg_name), &lens_grid_svg(&grid))?;
        lens_probes.push(LensProbe {
            prompt: prompt.clone(),
            json: json_name,
            svg: svg_name,
        });
    }

    let prune_keep = crate::analysis::union_plan(&table, cfg.analysis.prune_threshold)?;
    let summary = AnalyzeSummary {
        n_layers: ckpt.config.n_layers,
        n_routed_experts: ckpt.config.n_routed_experts,
        top_k: k,
        uniform_baseline: table.uniform_baseline,
        domains: table.domains.clone(),
        eval_tokens,
        specialization: headlines,
        top1_ppx_increase: perplexity.iter().map(|c| c.top1_increase()).collect(),
        similarity,
        perplexity,
        full_scale_reference: json!({"top1_mean_cos": 0.95, "top1_ppx_increase": 0.05}),
        prune_threshold: cfg.analysis.prune_threshold,
        prune_keep,
        lens_probes,
    };
    let text = to_json(&summary);
    write_text(&out.join("summary.json"), &format!("{text}\n"))?;
    Ok(text)
}

/// Prunes `model` by a specialization table and writes the result.
pub fn prune(
    model: &Path,
    table_path: &Path,
    threshold: f64,
    domain: Option<&str>,
    renormalize: bool,
    out: &Path,
) -> Result<String> {
    let ckpt = load_checkpoint(model)?;
    let text = std::fs::read_to_string(table_path).map_err(|e| Error::io(table_path, e))?;
    let table = SpecializationTable::from_csv(&text, ckpt.config.top_k)?;
    let config = &ckpt.config;
    if table.n != config.n_routed_experts || table.n_layers() != config.n_layers {
        return Err(Error::Consistency(format!(
            "table covers {} layers x {} experts, model has {} x {}",
            table.n_layers(),
            table.n,
            config.n_layers,
            config.n_routed_experts
        )));
    }
    let mut keep = match domain {
        Some(d) => {
            let di = table.domain_index(d)?;
            (0..table.n_layers())
                .map(|l| prune_plan(&table, l, di, threshold))
                .collect::<Result<Vec<_>>>()?
        }
        None => crate::analysis::union_plan(&table, threshold)?,
    };
    for (l, set) in keep.iter_mut().enumerate() {
        set.retain(|&e| config.expert_kept(l, e));
    }
    let pruned = prune_experts_with(&ckpt, &keep, renormalize)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    save_checkpoint(&pruned, out)?;
    let layers: Vec<_> = keep
        .iter()
        .enumerate()
        .map(|(l, set)| {
            eprintln!(
                "layer {l}: kept {}/{} experts",
                set.len(),
                config.n_routed_experts
            );
            json!({"layer": l, "kept": set.len(), "total": config.n_routed_experts, "keep": set})
        })
        .collect();
    Ok(to_json(
        &json!({"checkpoint": out, "threshold": threshold, "layers": layers}),
    ))
}
