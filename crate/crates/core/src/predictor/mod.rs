//! Token-level prosody predictors over phoneme or word features, and the
//! hierarchical word-then-phoneme composition.
//!
//! Predictors regress standardized targets; [`TargetCodec`] maps labels into
//! that space and predictions back to labels.

mod codec;
mod features;
mod model;
mod train;

pub use codec::{labels_from_prediction, LossKind, TargetCodec};
pub use features::{
    length_regulate, length_regulate_adjoint, PhonemeVocab, WordEmbeddings, WordFeatures,
    UNKNOWN_SYMBOL,
};
pub use model::{
    Features, FlatPredictor, HierarchicalPrediction, HierarchicalPredictor, InjectionMode,
    InputSpec, Predictor, PredictorSpec, TokenPrediction, WordCondition, WordInjection,
};
pub use train::{
    Conditioning, PredictorExample, PredictorStepRecord, Stage, StageProbe, StageTrainer,
};
