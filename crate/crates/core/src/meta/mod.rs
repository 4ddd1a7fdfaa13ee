//! Meta-learner: maps the averaged negative last-layer gradient δ to extra
//! 1×1 kernels and channel attention for the matcher.

mod config;
mod learner;
mod train;
mod weights;

pub use config::MetaConfig;
pub use learner::{compute_delta, delta_from_caches, patch_loss_on_tape, MetaBound, PatchCache};
pub use train::{
    calibrate_gain, evaluate_episode, meta_objective, meta_train, unadapted_loss, Episode,
    EpisodeScore, EpisodeSource, MetaHyper, MetaOutcome, PreparedEpisode,
};
pub use weights::MetaWeights;

#[cfg(test)]
mod tests;
