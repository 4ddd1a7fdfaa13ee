//! Fully-convolutional Siamese matcher: shared feature extractor, channel
//! attention, per-location ℓ2 normalization and cross-correlation, plus the
//! weighted logistic loss and supervised pretraining.

mod adaptive;
mod config;
mod label;
mod net;
mod pretrain;
mod weights;

pub use adaptive::AdaptiveState;
pub use config::{LayerSpec, LossWeighting, MatcherConfig, PoolSpec, Preset};
pub use label::{loss, LabelMap};
pub use net::{AdaptiveVars, BoundMatcher, LayerVars, Mode, ResponseMap, Trainable};
pub use pretrain::{
    batch_loss, batch_loss_and_grads, continue_pretrain, pretrain, smoothed, train_step,
    PairSource, PretrainHyper, PretrainOutcome, TrainingPair,
};
pub use weights::{CheckpointInfo, ConvLayer, MatcherWeights, BN_MOMENTUM};

#[cfg(test)]
mod tests;
