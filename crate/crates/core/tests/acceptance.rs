// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance run: trains the default configuration once, then
//! checks each criterion and prints one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use moelens::analysis::{
    perplexity, perplexity_vs_k, prune_experts, prune_experts_with, similarity_profile,
    similarity_profile_at, union_plan, SpecializationCounter, SpecializationTable,
};
use moelens::cli::{self, RunConfig};
use moelens::lens::{extended_logit_lens, logit_lens};
use moelens::model::{decode_checkpoint, encode_checkpoint, ModelConfig};
use moelens::trainer::{grad_check, synth_corpus, GradCheckOptions};
use moelens::{
    load_checkpoint, model_forward, Checkpoint, CheckpointError, Error, Prng, Tensor, Trace,
};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Run {
    fn model_path(&self) -> PathBuf {
        self.dir.join("model.moescp")
    }
}

fn default_config(dir: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let mut cfg = RunConfig::load(&path).expect("default config loads");
    cfg.output_dir = dir.to_path_buf();
    cfg.corpus_dir = Some(dir.join("corpus"));
    cfg
}

fn pipeline(dir: &Path) -> std::result::Result<Run, String> {
    let cfg = default_config(dir);
    let corpus_dir = cfg.corpus_dir.clone().unwrap();
    cli::gen_corpus(&cfg, &corpus_dir).map_err(|e| e.to_string())?;
    let run = Run {
        cfg,
        dir: dir.to_path_buf(),
    };
    cli::train(&run.cfg, &run.model_path()).map_err(|e| e.to_string())?;
    cli::analyze(&run.cfg, &run.model_path(), &dir.join("analysis")).map_err(|e| e.to_string())?;
    Ok(run)
}

struct Fixture {
    run: Run,
    model: Checkpoint,
    /// Held-out tokens per domain, as used by `analyze`.
    eval: Vec<(String, Vec<u32>)>,
    train_time: Duration,
    _tmp: tempfile::TempDir,
}

impl Fixture {
    fn traces(&self, tokens: &[u32], model: &Checkpoint) -> Vec<Trace> {
        cli_trace(model, tokens)
    }
}

fn cli_trace(model: &Checkpoint, tokens: &[u32]) -> Vec<Trace> {
    cli::trace_chunks(model, tokens).expect("tracing succeeds")
}

fn setup() -> std::result::Result<Fixture, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let run = pipeline(&tmp.path().join("run1"))?;
    let train_time = start.elapsed();
    let model = load_checkpoint(run.model_path()).map_err(|e| e.to_string())?;
    let eval = run
        .cfg
        .corpus
        .domains
        .iter()
        .map(|d| {
            let c =
                synth_corpus(d, run.cfg.analysis.eval_tokens, run.cfg.analysis.eval_seed).unwrap();
            (d.clone(), c.tokens)
        })
        .collect();
    Ok(Fixture {
        run,
        model,
        eval,
        train_time,
        _tmp: tmp,
    })
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

fn criterion_1(f: &Fixture) -> Check {
    let start = Instant::now();
    let m = &f.model;
    let (mut tokens, mut worst, mut cells) = (0, 0.0f64, 0);
    for ((_, toks), n) in f.eval.iter().zip([17usize, 17, 16]) {
        let (_, trace) = model_forward(m, &toks[..n], true, None).map_err(|e| e.to_string())?;
        tokens += n;
        for lt in &trace.unwrap().layers {
            for tr in &lt.tokens {
                let outs: Vec<&Tensor<f32>> = tr.expert_outputs.iter().collect();
                let ext = extended_logit_lens(
                    &tr.gates,
                    &outs,
                    Some(&tr.shared_output),
                    &tr.u,
                    &m.final_gain,
                    &m.unembed,
                )
                .map_err(|e| e.to_string())?;
                let base =
                    logit_lens(&tr.h, &m.final_gain, &m.unembed).map_err(|e| e.to_string())?;
                let d = max_abs_diff(ext.data(), base.data());
                worst = worst.max(d);
                ensure!(d <= 1e-4, "layer {} logit gap {d:e} > 1e-4", lt.layer);
                ensure!(
                    argmax(ext.data()) == argmax(base.data()),
                    "layer {} argmax differs",
                    lt.layer
                );
                cells += 1;
            }
        }
    }
    ensure!(tokens == 50, "expected 50 tokens, traced {tokens}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "{tokens} tokens x {} layers = {cells} cells, max logit gap {worst:.2e}",
        m.config.n_layers
    ))
}

/// Uniformly random k-subset of 0..n by partial Fisher-Yates.
fn random_subset(rng: &mut Prng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn criterion_2(f: &Fixture) -> Check {
    // Column sums on the trained model, from the written CSV and from traces.
    let k = f.model.config.top_k;
    let csv = std::fs::read_to_string(f.run.dir.join("analysis/specialization.csv"))
        .map_err(|e| e.to_string())?;
    let table = SpecializationTable::from_csv(&csv, k).map_err(|e| e.to_string())?;
    let mut counter = SpecializationCounter::new(&f.run.cfg.corpus.domains, 4, 16, k);
    for (d, (_, toks)) in f.eval.iter().enumerate() {
        for t in f.traces(toks, &f.model) {
            counter.add(d, &t).map_err(|e| e.to_string())?;
        }
    }
    let direct = counter.finish().map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for t in [&table, &direct] {
        for l in 0..t.n_layers() {
            for d in 0..t.domains.len() {
                let s: f64 = t.column(l, d).iter().sum();
                worst = worst.max((s - k as f64).abs());
                ensure!(
                    t.column(l, d).iter().all(|v| (0.0..=1.0).contains(v)),
                    "fraction outside [0, 1]"
                );
            }
        }
    }
    ensure!(worst <= 1e-9, "column sum off by {worst:e}");
    ensure!(
        direct.entries == table.entries,
        "CSV table differs from recomputed table"
    );

    // Monte-Carlo: a router choosing uniform random k-subsets.
    let (n, k_mc, tokens) = (16usize, 4usize, 10_000usize);
    let mut rng = Prng::new(1);
    let labels: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    let mut mc = SpecializationCounter::new(&labels, 1, n, k_mc);
    for d in 0..3 {
        let routing: Vec<moelens::TokenRouting> = (0..tokens)
            .map(|_| moelens::TokenRouting {
                u: Tensor::zeros(&[1]),
                probs: Tensor::filled(&[n], 1.0 / n as f32),
                selected: random_subset(&mut rng, n, k_mc),
                gates: vec![1.0 / n as f32; k_mc],
                expert_outputs: vec![],
                shared_output: Tensor::zeros(&[1]),
                h: Tensor::zeros(&[1]),
            })
            .collect();
        let trace = Trace {
            tokens: vec![0; tokens],
            layers: vec![moelens::LayerTrace {
                layer: 0,
                active_k: k_mc,
                tokens: routing,
            }],
        };
        mc.add(d, &trace).map_err(|e| e.to_string())?;
    }
    let mc = mc.finish().map_err(|e| e.to_string())?;
    let p = k_mc as f64 / n as f64;
    let sigma = (p * (1.0 - p) / tokens as f64).sqrt();
    let mut worst_z = 0.0f64;
    for e in 0..n {
        for d in 0..3 {
            worst_z = worst_z.max((mc.entries[0][e][d] - p).abs() / sigma);
        }
    }
    ensure!(
        worst_z <= 3.0,
        "Monte-Carlo fraction {worst_z:.2} sigma from k/n"
    );

    // Caption baselines as exact ratios.
    let baseline = |n, k| {
        ModelConfig {
            n_routed_experts: n,
            top_k: k,
            ..ModelConfig::default()
        }
        .uniform_baseline()
    };
    let (a, b, c) = (baseline(64, 6), baseline(60, 4), baseline(64, 8));
    ensure!(
        a == 6.0 / 64.0 && format!("{:.1}", a * 100.0) == "9.4",
        "6/64 -> {a}"
    );
    ensure!(
        b == 4.0 / 60.0 && format!("{:.2}", b * 100.0) == "6.67",
        "4/60 -> {b}"
    );
    ensure!(c == 0.125, "8/64 -> {c}");
    Ok(format!(
        "max |sum - k| {worst:.1e}; Monte-Carlo worst {worst_z:.2} sigma; baselines 9.4% 6.67% 12.5%"
    ))
}

fn criterion_3(_: &Fixture) -> Check {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 32,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_expert_hidden: 8,
        n_routed_experts: 4,
        n_shared_experts: 1,
        top_k: 2,
        max_seq_len: 8,
        seed: 3,
        ..ModelConfig::default()
    };
    let model = Checkpoint::init(&cfg).map_err(|e| e.to_string())?;
    let params = model.parameter_count();
    ensure!(params <= 5000, "{params} parameters");
    let batch = vec![vec![1, 5, 9, 3, 30, 2, 7], vec![4, 4, 8, 15, 16, 23, 1]];
    let opts = GradCheckOptions {
        samples: 150,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&model, &batch, &opts).map_err(|e| e.to_string())?;
    ensure!(
        report.samples.len() >= 100,
        "only {} samples",
        report.samples.len()
    );
    ensure!(
        report.max_rel_error < 1e-3,
        "max relative error {:e}",
        report.max_rel_error
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{params} parameters, {} samples, max relative error {:.2e}",
        report.samples.len(),
        report.max_rel_error
    ))
}

fn criterion_4(f: &Fixture) -> Check {
    let train_limit = Duration::from_secs(300);
    ensure!(
        f.train_time < train_limit,
        "default pipeline took {:?}",
        f.train_time
    );
    let csv = std::fs::read_to_string(f.run.dir.join("analysis/specialization.csv"))
        .map_err(|e| e.to_string())?;
    let table =
        SpecializationTable::from_csv(&csv, f.model.config.top_k).map_err(|e| e.to_string())?;
    let mut best: Option<(usize, String, f64)> = None;
    for l in 0..table.n_layers() {
        let tops: Vec<(usize, f64)> = (0..table.domains.len())
            .map(|d| table.max_share(l, d))
            .collect();
        let all_same = tops.iter().all(|t| t.0 == tops[0].0);
        for (d, &(_, share)) in tops.iter().enumerate() {
            let ratio = share / table.uniform_baseline;
            if ratio >= 2.0 && !all_same && best.as_ref().is_none_or(|b| ratio > b.2) {
                best = Some((l, table.domains[d].clone(), ratio));
            }
        }
    }
    match best {
        Some((l, d, r)) => Ok(format!(
            "layer {l}, domain {d}: top expert at {r:.2}x uniform; domains' top experts differ (pipeline {:.0}s)",
            f.train_time.as_secs_f64()
        )),
        None => Err("no (layer, domain) reaches 2x uniform with distinct top experts".into()),
    }
}

fn criterion_5(f: &Fixture) -> Check {
    let m = &f.model;
    let k = m.config.top_k;
    let mut lows = Vec::new();
    for (d, toks) in &f.eval {
        let traces = f.traces(toks, m);
        let p = similarity_profile(&traces, d).map_err(|e| e.to_string())?;
        ensure!(
            p.mean_cos.iter().all(|c| (-1.0..=1.0).contains(c)),
            "{d}: mean outside [-1, 1]"
        );
        let s = similarity_profile_at(&traces, d, k).map_err(|e| e.to_string())?;
        ensure!(
            s.mean_cos.iter().all(|&c| c == 1.0),
            "{d}: k'=k self-similarity {:?}",
            s.mean_cos
        );
        lows.push(p.mean_cos.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    let curves = perplexity_vs_k(m, &f.eval).map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    for (c, (_, toks)) in curves.iter().zip(&f.eval) {
        ensure!(
            c.norm_log_ppx[k - 1] == 1.0,
            "{}: anchor {}",
            c.domain,
            c.norm_log_ppx[k - 1]
        );
        let full = perplexity(m, toks, None).map_err(|e| e.to_string())?;
        let at_k = perplexity(m, toks, Some(k)).map_err(|e| e.to_string())?;
        ensure!(
            full.to_bits() == at_k.to_bits(),
            "{}: ppx(k) {at_k} != unrestricted {full}",
            c.domain
        );
        ensure!(
            c.ppx[k - 1].to_bits() == full.to_bits(),
            "{}: curve ppx(k) differs",
            c.domain
        );
        report.push(format!(
            "{} {:+.1}%",
            c.domain,
            100.0 * c.top1_increase().unwrap()
        ));
    }
    let min_cos = lows.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "min layer mean cos(H1, Hk) {min_cos:.4} (reference 0.95); ppx(k'=1) vs k: {} (reference +5%)",
        report.join(", ")
    ))
}

fn criterion_6(f: &Fixture) -> Check {
    let m = &f.model;
    let probe = &f.eval[0].1[..512];
    let windows: Vec<&[u32]> = probe.chunks(m.config.max_seq_len).collect();

    let keep_all = vec![(0..m.config.n_routed_experts).collect::<Vec<_>>(); m.config.n_layers];
    let same = prune_experts(m, &keep_all).map_err(|e| e.to_string())?;
    for w in &windows {
        let a = model_forward(m, w, false, None)
            .map_err(|e| e.to_string())?
            .0;
        let b = model_forward(&same, w, false, None)
            .map_err(|e| e.to_string())?
            .0;
        ensure!(
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "keep-all pruning changed logits"
        );
    }

    let mut selected = vec![std::collections::BTreeSet::new(); m.config.n_layers];
    for t in f.traces(probe, m) {
        for lt in &t.layers {
            selected[lt.layer].extend(lt.tokens.iter().flat_map(|tr| tr.selected.iter().copied()));
        }
    }
    let keep: Vec<Vec<usize>> = selected
        .iter()
        .map(|s| s.iter().copied().collect())
        .collect();
    let pruned = prune_experts(m, &keep).map_err(|e| e.to_string())?;
    let before = perplexity(m, probe, None).map_err(|e| e.to_string())?;
    let after = perplexity(&pruned, probe, None).map_err(|e| e.to_string())?;
    ensure!(
        (before - after).abs() <= 1e-6,
        "probe ppx {before} -> {after}"
    );
    let removed: usize = keep
        .iter()
        .map(|s| m.config.n_routed_experts - s.len())
        .sum();

    let table_csv = std::fs::read_to_string(f.run.dir.join("analysis/specialization.csv"))
        .map_err(|e| e.to_string())?;
    let table =
        SpecializationTable::from_csv(&table_csv, m.config.top_k).map_err(|e| e.to_string())?;
    let plan = union_plan(&table, f.run.cfg.analysis.prune_threshold).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (model, sets) in [
        (pruned, keep.clone()),
        (
            prune_experts(m, &plan).map_err(|e| e.to_string())?,
            plan.clone(),
        ),
        (
            prune_experts_with(m, &plan, true).map_err(|e| e.to_string())?,
            plan.clone(),
        ),
    ] {
        let bytes = encode_checkpoint(&model);
        let model = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
        for (_, toks) in &f.eval {
            for t in f.traces(&toks[..1024], &model) {
                for lt in &t.layers {
                    for tr in &lt.tokens {
                        ensure!(
                            tr.selected.iter().all(|e| sets[lt.layer].contains(e)),
                            "layer {} routed outside its keep-set",
                            lt.layer
                        );
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "keep-all bitwise no-op; selected-set prune removes {removed} experts, probe ppx {before:.6} -> {after:.6}; {checked} routed tokens inside keep-sets"
    ))
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn criterion_7(f: &Fixture) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = pipeline(&tmp.path().join("run2"))?;
    let a = collect_files(&f.run.dir);
    let b = collect_files(&second.dir);
    ensure!(
        a.keys().eq(b.keys()),
        "artifact sets differ: {:?} vs {:?}",
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &a {
        ensure!(&b[name] == bytes, "{} differs between runs", name.display());
    }
    let kinds = ["csv", "json", "svg", "moescp", "bytes"];
    let counts: Vec<String> = kinds
        .iter()
        .map(|ext| {
            let n = a
                .keys()
                .filter(|p| p.extension().is_some_and(|e| e == *ext))
                .count();
            format!("{n} {ext}")
        })
        .collect();
    Ok(format!(
        "{} artifacts byte-identical ({})",
        a.len(),
        counts.join(", ")
    ))
}

fn criterion_8(f: &Fixture) -> Check {
    let m = &f.model;
    let bytes = encode_checkpoint(m);
    let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    ensure!(back.bit_eq(m), "decoded checkpoint differs");
    ensure!(encode_checkpoint(&back) == bytes, "re-encoding differs");
    let on_disk = std::fs::read(f.run.model_path()).map_err(|e| e.to_string())?;
    ensure!(on_disk == bytes, "saved file differs from encoding");

    let mut truncations = 0;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    for cut in [
        0,
        5,
        8,
        12,
        16,
        16 + header_len / 2,
        16 + header_len,
        bytes.len() / 2,
        bytes.len() - 1,
    ] {
        match decode_checkpoint(&bytes[..cut]) {
            Err(Error::Checkpoint(CheckpointError::Truncated { .. })) => truncations += 1,
            other => return Err(format!("cut at {cut}: {:?}", other.err())),
        }
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("short.moescp");
    std::fs::write(&path, &bytes[..bytes.len() - 7]).map_err(|e| e.to_string())?;
    ensure!(
        matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ),
        "truncated file on disk not reported as truncated"
    );

    let mut header: serde_json::Value =
        serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    let rebuild = |h: &serde_json::Value, blob: &[u8]| {
        let text = serde_json::to_vec(h).unwrap();
        let mut out = b"MOESCP01".to_vec();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(blob);
        out
    };
    let blob = &bytes[16 + header_len..];
    let removed = header["tensors"].as_array_mut().unwrap().remove(5);
    let missing = rebuild(&header, blob);
    match decode_checkpoint(&missing) {
        Err(Error::Checkpoint(CheckpointError::Inconsistent { tensor, .. })) => {
            ensure!(
                tensor == removed["name"],
                "missing tensor reported as {tensor:?}"
            )
        }
        other => return Err(format!("missing tensor: {:?}", other.err())),
    }
    header["tensors"].as_array_mut().unwrap().insert(5, removed);
    header["tensors"][0]["shape"] = serde_json::json!([257, 64]);
    ensure!(
        matches!(
            decode_checkpoint(&rebuild(&header, blob)),
            Err(Error::Checkpoint(CheckpointError::Inconsistent { .. }))
        ),
        "wrong shape not reported as inconsistent"
    );
    let mut bad = bytes.clone();
    bad[..8].copy_from_slice(b"NOTACKPT");
    ensure!(
        matches!(
            decode_checkpoint(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
        ),
        "bad magic not reported"
    );
    bad[..8].copy_from_slice(b"MOESCP02");
    ensure!(
        matches!(
            decode_checkpoint(&bad),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { .. }))
        ),
        "version mismatch not reported"
    );
    Ok(format!(
        "{} byte round trip exact; {truncations} truncations, missing/misshapen tensors, bad magic and version all typed",
        bytes.len()
    ))
}

fn main() {
    let titles = [
        "ensemble identity: full top-k extended lens equals layer-output lens",
        "specialization mass, uniform-router Monte-Carlo, caption baselines",
        "analytic vs central-difference gradients",
        "specialization after default training",
        "similarity profile and perplexity curve anchors",
        "pruning soundness",
        "end-to-end determinism",
        "checkpoint robustness",
    ];
    let checks: [fn(&Fixture) -> Check; 8] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
    ];
    let start = Instant::now();
    eprintln!("acceptance: running the default pipeline (gen-corpus, train, analyze)");
    let fixture = match setup() {
        Ok(f) => f,
        Err(e) => {
            println!("setup FAIL: {e}");
            for (i, t) in titles.iter().enumerate() {
                println!("criterion {} FAIL: {t} (setup failed)", i + 1);
            }
            std::process::exit(1);
        }
    };
    let mut failed = 0;
    for (i, (title, check)) in titles.iter().zip(checks).enumerate() {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&fixture))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} PASS: {title}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL: {title}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/8 passed in {:.0}s",
        8 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
