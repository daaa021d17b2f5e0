//! Out-of-domain detection for intent classifiers.
//!
//! The crate trains small LSTM-based models (a discriminative classifier, a
//! generative classifier, and unconditional language models) on in-domain
//! utterances, then scores test sentences with several OOD signals:
//! posterior-based scores (max softmax probability, entropy, KL to fixed
//! references), local outlier factor over sentence features, and likelihood
//! ratios against background models trained on noised text. Everything is
//! deterministic given a seed: repeated runs produce byte-identical reports.

pub mod corpus;
pub mod error;
pub mod experiment;
pub mod lof;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod noising;
pub mod scoring;
pub mod seeding;
pub mod synth;

pub use error::{Error, Result};
