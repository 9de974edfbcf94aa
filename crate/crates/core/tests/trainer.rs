// SPDX-License-Identifier: MIT OR Apache-2.0

use moelens::trainer::{synth_corpus, train, unigram_tv_distance, TrainConfig};
use moelens::{Checkpoint, ModelConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 258,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_expert_hidden: 12,
        n_routed_experts: 6,
        n_shared_experts: 1,
        top_k: 2,
        max_seq_len: 16,
        seed: 2,
        ..ModelConfig::default()
    }
}

fn corpora() -> Vec<moelens::trainer::DomainCorpus> {
    ["A", "B", "C"]
        .iter()
        .map(|d| synth_corpus(d, 10_000, 4).unwrap())
        .collect()
}

fn run(steps: usize) -> moelens::trainer::TrainOutcome {
    let tc = TrainConfig {
        steps,
        batch_size: 4,
        seq_len: 16,
        ..TrainConfig::default()
    };
    train(&Checkpoint::init(&tiny()).unwrap(), &corpora(), &tc).unwrap()
}

#[test]
fn loss_decreases() {
    let out = run(120);
    let h = &out.history;
    assert_eq!(h.len(), 120);
    let mean = |r: &[moelens::trainer::TrainRecord]| {
        r.iter().map(|x| x.cross_entropy).sum::<f64>() / r.len() as f64
    };
    let (first, last) = (mean(&h[..10]), mean(&h[h.len() - 10..]));
    assert!(last < first - 0.5, "cross entropy {first:.3} -> {last:.3}");
    // Initial loss is near ln(vocab).
    assert!((h[0].cross_entropy - (258f64).ln()).abs() < 1.0);
    for r in h {
        assert!(r.balance_loss.is_finite() && r.balance_loss > 0.0);
    }
}

#[test]
fn training_is_deterministic() {
    let a = run(20);
    let b = run(20);
    assert!(a.checkpoint.bit_eq(&b.checkpoint));
    assert_eq!(a.history, b.history);
}

#[test]
fn zero_steps_returns_initialization() {
    let out = run(0);
    assert!(out.checkpoint.bit_eq(&Checkpoint::init(&tiny()).unwrap()));
    assert!(out.history.is_empty());
}

#[test]
fn domains_have_distinct_statistics() {
    let c = corpora();
    for i in 0..3 {
        for j in i + 1..3 {
            let d = unigram_tv_distance(&c[i].tokens, &c[j].tokens);
            assert!(d > 0.3, "domains {i} and {j}: tv {d}");
        }
    }
    let again = synth_corpus("B", 10_000, 4).unwrap();
    assert_eq!(again.tokens, c[1].tokens);
    assert_ne!(synth_corpus("B", 10_000, 5).unwrap().tokens, c[1].tokens);
}
