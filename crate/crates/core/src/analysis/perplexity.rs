// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::run;
use crate::model::weights::Checkpoint;
use crate::tensor::Real;
use crate::trainer::loss::row_nll;

/// Perplexity over a range of active-expert counts `k'` for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityCurve {
    pub domain: String,
    pub k_primes: Vec<usize>,
    /// `ppx[i]` is the perplexity with `k' = k_primes[i]`.
    pub ppx: Vec<f64>,
    /// `ln ppx(k') / ln ppx(k)`; exactly 1 at `k' = k`.
    pub norm_log_ppx: Vec<f64>,
    /// Perplexity with all `k` experts active.
    pub ppx_full: f64,
}

impl PerplexityCurve {
    pub fn to_csv(curves: &[PerplexityCurve]) -> String {
        let mut out = String::from("domain,k_prime,ppx,norm_log_ppx\n");
        for c in curves {
            for ((kp, p), n) in c.k_primes.iter().zip(&c.ppx).zip(&c.norm_log_ppx) {
                writeln!(out, "{},{kp},{p},{n}", c.domain).unwrap();
            }
        }
        out
    }

    /// Relative perplexity increase from all `k` experts down to one, when
    /// `k' = 1` is on the curve.
    pub fn top1_increase(&self) -> Option<f64> {
        (self.k_primes.first() == Some(&1)).then(|| self.ppx[0] / self.ppx_full - 1.0)
    }
}

/// Window start offsets covering every next-token transition exactly once.
pub(crate) fn windows(n: usize, max_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + max_len).min(n);
        out.push((start, end));
        start = end - 1;
    }
    out
}

/// `exp` of the mean next-token NLL; sequences longer than the model's
/// context are scored in consecutive windows sharing one boundary token.
pub fn perplexity<T: Real>(
    ckpt: &Checkpoint<T>,
    tokens: &[u32],
    k_override: Option<usize>,
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::param("perplexity needs at least two tokens"));
    }
    if ckpt.config.max_seq_len < 2 {
        return Err(Error::param("perplexity needs max_seq_len >= 2"));
    }
    let vocab = ckpt.config.vocab_size;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (s, e) in windows(tokens.len(), ckpt.config.max_seq_len) {
        let w = &tokens[s..e];
        let pass = run(ckpt, w, k_override, false)?;
        for (t, &next) in w[1..].iter().enumerate() {
            total += row_nll(&pass.logits[t * vocab..(t + 1) * vocab], next as usize);
            count += 1;
        }
    }
    Ok((total / count as f64).exp())
}

/// Perplexity for each `k'` in `k_primes`, normalized against all `k` experts.
pub fn perplexity_curve<T: Real>(
    ckpt: &Checkpoint<T>,
    domain: &str,
    tokens: &[u32],
    k_primes: RangeInclusive<usize>,
) -> Result<PerplexityCurve> {
    let k = ckpt.config.top_k;
    let (lo, hi) = (*k_primes.start(), *k_primes.end());
    if lo == 0 || lo > hi || hi > k {
        return Err(Error::param(format!(
            "k' range {lo}..={hi} not within 1..={k}"
        )));
    }
    let ppx = k_primes
        .clone()
        .map(|kp| perplexity(ckpt, tokens, Some(kp)))
        .collect::<Result<Vec<f64>>>()?;
    let ppx_full = if hi == k {
        ppx[ppx.len() - 1]
    } else {
        perplexity(ckpt, tokens, None)?
    };
    let anchor = ppx_full.ln();
    let norm_log_ppx = k_primes
        .clone()
        .zip(&ppx)
        .map(|(kp, p)| if kp == k { 1.0 } else { p.ln() / anchor })
        .collect();
    Ok(PerplexityCurve {
        domain: domain.to_string(),
        k_primes: k_primes.collect(),
        ppx,
        norm_log_ppx,
        ppx_full,
    })
}

/// [`perplexity_curve`] over `k' = 1..=k` for every corpus.
pub fn perplexity_vs_k<T: Real>(
    ckpt: &Checkpoint<T>,
    corpora: &[(String, Vec<u32>)],
) -> Result<Vec<PerplexityCurve>> {
    corpora
        .iter()
        .map(|(domain, tokens)| perplexity_curve(ckpt, domain, tokens, 1..=ckpt.config.top_k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_forward, ModelConfig};
    use crate::tensor::Tensor;
    use crate::trainer::loss::cross_entropy_loss;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_expert_hidden: 4,
            n_routed_experts: 4,
            top_k: 2,
            max_seq_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn window_cover() {
        assert_eq!(windows(5, 8), vec![(0, 5)]);
        assert_eq!(windows(10, 4), vec![(0, 4), (3, 7), (6, 10)]);
        assert_eq!(windows(8, 4), vec![(0, 4), (3, 7), (6, 8)]);
        assert_eq!(windows(1, 4), vec![]);
        for n in 2..40 {
            let transitions: usize = windows(n, 5).iter().map(|(s, e)| e - s - 1).sum();
            assert_eq!(transitions, n - 1);
        }
    }

    #[test]
    fn uniform_logits_give_vocab() {
        let mut ckpt = Checkpoint::<f32>::init(&config()).unwrap();
        ckpt.unembed.data_mut().fill(0.0);
        let toks: Vec<u32> = (0..17).map(|i| i * 7 % 40).collect();
        let p = perplexity(&ckpt, &toks, None).unwrap();
        assert!((p / 40.0 - 1.0).abs() < 0.01);
        assert!(perplexity(&ckpt, &toks[..1], None).is_err());
    }

    #[test]
    fn full_k_override_is_bitwise_noop_and_matches_direct() {
        let ckpt = Checkpoint::<f32>::init(&config()).unwrap();
        let toks = [3u32, 9, 1, 22, 5];
        let base = perplexity(&ckpt, &toks, None).unwrap();
        assert_eq!(
            base.to_bits(),
            perplexity(&ckpt, &toks, Some(2)).unwrap().to_bits()
        );
        let (logits, _) = model_forward(&ckpt, &toks, false, None).unwrap();
        let rows = Tensor::new(vec![4, 40], logits.data()[..160].to_vec()).unwrap();
        let direct = cross_entropy_loss(&rows, &toks[1..]).unwrap().exp();
        assert!((base - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn curve_matches_independent_evaluations() {
        let ckpt = Checkpoint::<f32>::init(&config()).unwrap();
        let toks: Vec<u32> = (0..14).map(|i| (i * 11 + 3) % 40).collect();
        let curves = perplexity_vs_k(&ckpt, &[("A".to_string(), toks.clone())]).unwrap();
        let c = &curves[0];
        assert_eq!(c.norm_log_ppx[1], 1.0);
        for kp in 1..=2 {
            // Direct evaluation without the windowing helper.
            let mut nll = 0.0;
            for (s, e) in [(0usize, 6usize), (5, 11), (10, 14)] {
                let (logits, _) = model_forward(&ckpt, &toks[s..e], false, Some(kp)).unwrap();
                for t in 0..e - s - 1 {
                    let row: Vec<f64> = logits.row(t).iter().map(|&v| v as f64).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    nll += lse - row[toks[s + t + 1] as usize];
                }
            }
            let direct = (nll / 13.0).exp();
            assert!((c.ppx[kp - 1] - direct).abs() < 1e-9 * direct);
        }
        assert!((c.norm_log_ppx[0] - c.ppx[0].ln() / c.ppx[1].ln()).abs() < 1e-15);
        assert_eq!(c.k_primes, vec![1, 2]);
        assert_eq!(c.ppx_full, c.ppx[1]);
        assert_eq!(c.top1_increase(), Some(c.ppx[0] / c.ppx[1] - 1.0));
        let part = perplexity_curve(&ckpt, "A", &toks, 1..=1).unwrap();
        assert_eq!(part.ppx, vec![c.ppx[0]]);
        assert_eq!(part.norm_log_ppx, vec![c.norm_log_ppx[0]]);
        assert!(perplexity_curve(&ckpt, "A", &toks, 0..=1).is_err());
        assert!(perplexity_curve(&ckpt, "A", &toks, 1..=3).is_err());
        let csv = PerplexityCurve::to_csv(&curves);
        assert!(csv.starts_with("domain,k_prime,ppx,norm_log_ppx\nA,1,"));
        assert!(csv.ends_with(",1\n"));
    }
}
