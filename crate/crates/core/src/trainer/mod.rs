// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic corpora, losses, SGD training and gradient checking.

pub mod corpus;
pub mod gradcheck;
pub mod loss;
pub mod train;

pub use corpus::{synth_corpus, unigram_tv_distance, Domain, DomainCorpus};
pub use gradcheck::{
    analytic_gradients, grad_check, relative_error, GradCheckOptions, GradCheckReport, GradSample,
};
pub use loss::{balance_loss, cross_entropy_loss, RoutingStats};
pub use train::{
    train, train_with_progress, write_loss_csv, TrainConfig, TrainOutcome, TrainRecord,
};
