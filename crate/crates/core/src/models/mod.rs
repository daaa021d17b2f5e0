//! The three model families and their shared training machinery.

pub mod common;
pub mod discriminative;
pub mod generative;
pub mod lm;

pub use common::{
    apply_pretrained_embeddings, Better, EncodedRow, EpochLog, SequenceBatch, TrainLog,
    TrainParams,
};
pub use discriminative::{
    train_discriminative_classifier, DiscConfig, DiscriminativeClassifier, HeadMode,
};
pub use generative::{train_generative_classifier, GenConfig, GenerativeClassifier};
pub use lm::{train_language_model, LanguageModel, LmConfig, TrainText};
