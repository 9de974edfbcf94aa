// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{Domain, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub domains: Vec<String>,
    /// Tokens generated per domain for training.
    pub length: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            domains: vec!["A".into(), "B".into(), "C".into()],
            length: 100_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Held-out tokens per domain for tracing and perplexity.
    pub eval_tokens: usize,
    pub eval_seed: u64,
    /// Inclusive `[lo, hi]` range of active experts for the perplexity
    /// curve; `None` means `[1, top_k]`.
    pub k_prime_range: Option<[usize; 2]>,
    /// Multiple of the uniform share `k/n` an expert needs to be kept.
    pub prune_threshold: f64,
    pub probe_prompts: Vec<String>,
    pub lens_exclude_shared: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            eval_tokens: 2048,
            eval_seed: 7,
            k_prime_range: None,
            prune_threshold: 2.0,
            probe_prompts: vec![
                "the cat sat on the".into(),
                "12+34=46;7*".into(),
                "AB(C,[D])\nK(".into(),
            ],
            lens_exclude_shared: false,
        }
    }
}

/// One document driving every pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub analysis: AnalysisConfig,
    /// Default output directory.
    pub output_dir: PathBuf,
    /// Where `gen-corpus` writes and `train` reads corpora; generated in
    /// memory when absent.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: PathBuf::from("out"),
            corpus_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "run config".into(),
            message: e.to_string(),
        })?;
        // Joining an absolute path replaces `base`.
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.corpus_dir = cfg.corpus_dir.as_deref().map(|p| base.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.corpus.domains.is_empty() {
            return Err(Error::param("corpus.domains is empty"));
        }
        for (i, d) in self.corpus.domains.iter().enumerate() {
            d.parse::<Domain>()?;
            if self.corpus.domains[..i].contains(d) {
                return Err(Error::param(format!("domain {d} listed twice")));
            }
        }
        if self.corpus.length <= self.train.seq_len {
            return Err(Error::param("corpus.length must exceed train.seq_len"));
        }
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::param("train.seq_len exceeds model.max_seq_len"));
        }
        if self.analysis.eval_tokens < 2 {
            return Err(Error::param("analysis.eval_tokens must be at least 2"));
        }
        let [lo, hi] = self.k_prime_range();
        if lo == 0 || lo > hi || hi > self.model.top_k {
            return Err(Error::param(format!(
                "analysis.k_prime_range [{lo}, {hi}] not within [1, {}]",
                self.model.top_k
            )));
        }
        let t = self.analysis.prune_threshold;
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::param(
                "analysis.prune_threshold must be finite and >= 0",
            ));
        }
        for p in &self.analysis.probe_prompts {
            if p.is_empty() || p.len() > self.model.max_seq_len {
                return Err(Error::param(format!(
                    "probe prompt {p:?} must have 1..={} bytes",
                    self.model.max_seq_len
                )));
            }
        }
        Ok(())
    }

    pub fn k_prime_range(&self) -> [usize; 2] {
        self.analysis.k_prime_range.unwrap_or([1, self.model.top_k])
    }

    pub fn domains(&self) -> Vec<Domain> {
        self.corpus
            .domains
            .iter()
            .map(|d| d.parse().expect("validated"))
            .collect()
    }
}
