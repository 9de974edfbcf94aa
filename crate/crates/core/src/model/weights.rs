// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::prng::Prng;
use crate::tensor::{Real, Tensor};

/// One feed-forward expert: `silu(x · w_in) · w_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights<T: Real = f32> {
    /// `d_model × d_expert_hidden`
    pub w_in: Tensor<T>,
    /// `d_expert_hidden × d_model`
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights<T: Real = f32> {
    /// `d_model × n_routed_experts`
    pub w_route: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T: Real = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// Everything belonging to one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    pub attn_gain: Tensor<T>,
    pub attn: AttentionWeights<T>,
    pub moe_gain: Tensor<T>,
    pub router: RouterWeights<T>,
    /// Routed experts by index; `None` once pruned away.
    pub experts: Vec<Option<ExpertWeights<T>>>,
    pub shared: Vec<ExpertWeights<T>>,
}

/// Config plus every weight of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub token_embedding: Tensor<T>,
    /// `max_seq_len × d_model`
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_gain: Tensor<T>,
    /// Unembedding `W_U`, `d_model × vocab`.
    pub unembed: Tensor<T>,
}

fn gaussian<T: Real>(rng: &mut Prng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is nonzero")
}

impl<T: Real> ExpertWeights<T> {
    fn init(rng: &mut Prng, d: usize, hidden: usize) -> Self {
        Self {
            w_in: gaussian(rng, &[d, hidden], 1.0 / (d as f64).sqrt()),
            w_out: gaussian(rng, &[hidden, d], 1.0 / (hidden as f64).sqrt()),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_in: Tensor::zeros(self.w_in.shape()),
            w_out: Tensor::zeros(self.w_out.shape()),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    /// Seeded random initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.expert_keep.is_some() {
            return Err(Error::param("cannot initialize a pruned model"));
        }
        let d = config.d_model;
        let mut rng = Prng::new(config.seed);
        let mat = 1.0 / (d as f64).sqrt();
        let token_embedding = gaussian(&mut rng, &[config.vocab_size, d], 1.0);
        let position_embedding = gaussian(&mut rng, &[config.max_seq_len, d], 0.1);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_gain: Tensor::filled(&[d], T::one()),
                attn: AttentionWeights {
                    wq: gaussian(&mut rng, &[d, d], mat),
                    wk: gaussian(&mut rng, &[d, d], mat),
                    wv: gaussian(&mut rng, &[d, d], mat),
                    wo: gaussian(&mut rng, &[d, d], mat),
                },
                moe_gain: Tensor::filled(&[d], T::one()),
                router: RouterWeights {
                    w_route: gaussian(&mut rng, &[d, config.n_routed_experts], mat),
                },
                experts: (0..config.n_routed_experts)
                    .map(|_| Some(ExpertWeights::init(&mut rng, d, config.d_expert_hidden)))
                    .collect(),
                shared: (0..config.n_shared_experts)
                    .map(|_| ExpertWeights::init(&mut rng, d, config.d_expert_hidden))
                    .collect(),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::filled(&[d], T::one()),
            unembed: gaussian(&mut rng, &[d, config.vocab_size], mat),
        })
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            token_embedding: Tensor::zeros(self.token_embedding.shape()),
            position_embedding: Tensor::zeros(self.position_embedding.shape()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_gain: Tensor::zeros(l.attn_gain.shape()),
                    attn: AttentionWeights {
                        wq: Tensor::zeros(l.attn.wq.shape()),
                        wk: Tensor::zeros(l.attn.wk.shape()),
                        wv: Tensor::zeros(l.attn.wv.shape()),
                        wo: Tensor::zeros(l.attn.wo.shape()),
                    },
                    moe_gain: Tensor::zeros(l.moe_gain.shape()),
                    router: RouterWeights {
                        w_route: Tensor::zeros(l.router.w_route.shape()),
                    },
                    experts: l
                        .experts
                        .iter()
                        .map(|e| e.as_ref().map(ExpertWeights::zeros_like))
                        .collect(),
                    shared: l.shared.iter().map(ExpertWeights::zeros_like).collect(),
                })
                .collect(),
            final_gain: Tensor::zeros(self.final_gain.shape()),
            unembed: Tensor::zeros(self.unembed.shape()),
        }
    }

    /// Element-type conversion, e.g. to `f64` for gradient checking.
    pub fn cast<U: Real>(&self) -> Checkpoint<U> {
        let ex = |e: &ExpertWeights<T>| ExpertWeights {
            w_in: e.w_in.cast(),
            w_out: e.w_out.cast(),
        };
        Checkpoint {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_gain: l.attn_gain.cast(),
                    attn: AttentionWeights {
                        wq: l.attn.wq.cast(),
                        wk: l.attn.wk.cast(),
                        wv: l.attn.wv.cast(),
                        wo: l.attn.wo.cast(),
                    },
                    moe_gain: l.moe_gain.cast(),
                    router: RouterWeights {
                        w_route: l.router.w_route.cast(),
                    },
                    experts: l.experts.iter().map(|e| e.as_ref().map(ex)).collect(),
                    shared: l.shared.iter().map(ex).collect(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            unembed: self.unembed.cast(),
        }
    }

    /// Every tensor with its canonical name, in persistence order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_gain"), &layer.attn_gain));
            out.push((format!("layers.{l}.attn.wq"), &layer.attn.wq));
            out.push((format!("layers.{l}.attn.wk"), &layer.attn.wk));
            out.push((format!("layers.{l}.attn.wv"), &layer.attn.wv));
            out.push((format!("layers.{l}.attn.wo"), &layer.attn.wo));
            out.push((format!("layers.{l}.moe_gain"), &layer.moe_gain));
            out.push((format!("layers.{l}.router.w_route"), &layer.router.w_route));
            for (e, ex) in layer.experts.iter().enumerate() {
                if let Some(ex) = ex {
                    out.push((format!("layers.{l}.experts.{e}.w_in"), &ex.w_in));
                    out.push((format!("layers.{l}.experts.{e}.w_out"), &ex.w_out));
                }
            }
            for (s, ex) in layer.shared.iter().enumerate() {
                out.push((format!("layers.{l}.shared.{s}.w_in"), &ex.w_in));
                out.push((format!("layers.{l}.shared.{s}.w_out"), &ex.w_out));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable view in the same order as [`Checkpoint::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_gain);
            out.push(&mut layer.attn.wq);
            out.push(&mut layer.attn.wk);
            out.push(&mut layer.attn.wv);
            out.push(&mut layer.attn.wo);
            out.push(&mut layer.moe_gain);
            out.push(&mut layer.router.w_route);
            for ex in layer.experts.iter_mut().flatten() {
                out.push(&mut ex.w_in);
                out.push(&mut ex.w_out);
            }
            for ex in &mut layer.shared {
                out.push(&mut ex.w_in);
                out.push(&mut ex.w_out);
            }
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.unembed);
        out
    }

    /// Expected `(name, shape)` directory implied by the config alone.
    pub fn expected_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let h = config.d_expert_hidden;
        let mut out = vec![
            ("token_embedding".to_string(), vec![config.vocab_size, d]),
            (
                "position_embedding".to_string(),
                vec![config.max_seq_len, d],
            ),
        ];
        for l in 0..config.n_layers {
            out.push((format!("layers.{l}.attn_gain"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{l}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("layers.{l}.moe_gain"), vec![d]));
            out.push((
                format!("layers.{l}.router.w_route"),
                vec![d, config.n_routed_experts],
            ));
            for e in 0..config.n_routed_experts {
                if config.expert_kept(l, e) {
                    out.push((format!("layers.{l}.experts.{e}.w_in"), vec![d, h]));
                    out.push((format!("layers.{l}.experts.{e}.w_out"), vec![h, d]));
                }
            }
            for s in 0..config.n_shared_experts {
                out.push((format!("layers.{l}.shared.{s}.w_in"), vec![d, h]));
                out.push((format!("layers.{l}.shared.{s}.w_out"), vec![h, d]));
            }
        }
        out.push(("final_gain".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, config.vocab_size]));
        out
    }

    /// Rebuilds a checkpoint from tensors in [`Checkpoint::expected_layout`] order.
    pub(crate) fn from_layout(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::param("too few tensors for layout"))
        };
        let token_embedding = next()?;
        let position_embedding = next()?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let attn_gain = next()?;
            let attn = AttentionWeights {
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
            };
            let moe_gain = next()?;
            let router = RouterWeights { w_route: next()? };
            let mut experts = Vec::with_capacity(config.n_routed_experts);
            for e in 0..config.n_routed_experts {
                experts.push(if config.expert_kept(l, e) {
                    Some(ExpertWeights {
                        w_in: next()?,
                        w_out: next()?,
                    })
                } else {
                    None
                });
            }
            let mut shared = Vec::with_capacity(config.n_shared_experts);
            for _ in 0..config.n_shared_experts {
                shared.push(ExpertWeights {
                    w_in: next()?,
                    w_out: next()?,
                });
            }
            layers.push(LayerWeights {
                attn_gain,
                attn,
                moe_gain,
                router,
                experts,
                shared,
            });
        }
        let final_gain = next()?;
        let unembed = next()?;
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            unembed,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bitwise equality of config and every tensor.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.config != other.config {
            return false;
        }
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
