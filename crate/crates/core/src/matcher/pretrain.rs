//! Supervised training of the matcher on (exemplar, search, position)
//! triples.

use super::config::MatcherConfig;
use super::label::LabelMap;
use super::net::{Mode, Trainable};
use super::weights::MatcherWeights;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub exemplar: Tensor,
    pub search: Tensor,
    /// Response cell (row, col) of the target inside `search`.
    pub target: (usize, usize),
}

/// Anything that can hand out training pairs.
pub trait PairSource {
    fn sample_pair(&self, rng: &mut Rng) -> Result<TrainingPair>;

    fn is_empty(&self) -> bool;
}

#[derive(Clone, Debug)]
pub struct PretrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub weights: MatcherWeights,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// Batch loss (mean over pairs) and its gradient with respect to every
/// trainable tensor, in [`MatcherWeights::params`] order. Train mode uses
/// one set of batch statistics per layer across all exemplar and search
/// maps of the batch; the statistics are returned for the running-average
/// update.
pub fn batch_loss_and_grads(
    weights: &MatcherWeights,
    pairs: &[TrainingPair],
    mode: Mode,
) -> Result<(f64, Vec<Tensor>, Vec<crate::autodiff::BatchStats>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, Trainable::All);
    let mut images = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        images.push(tape.constant(p.exemplar.clone()));
    }
    for p in pairs {
        images.push(tape.constant(p.search.clone()));
    }
    let (feats, stats) = weights.features_on_tape(&mut tape, &bound, None, &images, mode)?;
    let (fx, fz) = feats.split_at(pairs.len());
    let mut losses = Vec::with_capacity(pairs.len());
    for ((x, z), p) in fx.iter().zip(fz).zip(pairs) {
        let resp = weights.response_on_tape(&mut tape, *x, *z)?;
        let label = LabelMap::for_config(weights.config(), p.target)?;
        losses.push(tape.logistic_loss(resp, label.labels(), label.weights())?);
    }
    let total = tape.add_all(&losses)?;
    let mean = tape.scale(total, 1.0 / pairs.len() as f64)?;
    let value = tape.value(mean).item();
    let mut grads = tape.backward(mean)?;
    let g = bound
        .param_vars()
        .into_iter()
        .map(|v| {
            grads
                .take(v)
                .ok_or_else(|| Error::invalid("missing parameter gradient"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, g, stats))
}

/// Eval- or train-mode batch loss without gradients.
pub fn batch_loss(weights: &MatcherWeights, pairs: &[TrainingPair], mode: Mode) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, Trainable::Nothing);
    let mut images = Vec::with_capacity(pairs.len() * 2);
    for t in pairs
        .iter()
        .map(|p| &p.exemplar)
        .chain(pairs.iter().map(|p| &p.search))
    {
        images.push(tape.constant(t.clone()));
    }
    let (feats, _) = weights.features_on_tape(&mut tape, &bound, None, &images, mode)?;
    let (fx, fz) = feats.split_at(pairs.len());
    let mut total = 0.0;
    for ((x, z), p) in fx.iter().zip(fz).zip(pairs) {
        let resp = weights.response_on_tape(&mut tape, *x, *z)?;
        let label = LabelMap::for_config(weights.config(), p.target)?;
        let l = tape.logistic_loss(resp, label.labels(), label.weights())?;
        total += tape.value(l).item();
    }
    Ok(total / pairs.len() as f64)
}

/// One Adam step on a batch; returns the batch loss before the update.
pub fn train_step(
    weights: &mut MatcherWeights,
    pairs: &[TrainingPair],
    adam: &mut Adam,
) -> Result<f64> {
    let (loss, grads, stats) = batch_loss_and_grads(weights, pairs, Mode::Train)?;
    {
        let mut params = weights.params_mut();
        let grefs: Vec<&Tensor> = grads.iter().collect();
        adam.step(&mut params, &grefs)?;
    }
    for (i, s) in stats.iter().enumerate() {
        weights.update_running_stats(i, &s.mean, &s.var, s.count);
    }
    Ok(loss)
}

/// Trains freshly initialized weights. Initialization draws from stream
/// `(seed, 0)`, iteration `i` samples its batch from stream `(seed, i + 1)`.
pub fn pretrain(
    source: &dyn PairSource,
    config: &MatcherConfig,
    hyper: &PretrainHyper,
    mut progress: impl FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    let weights = MatcherWeights::init(config, &mut Rng::derive(hyper.seed, 0))?;
    continue_pretrain(source, weights, hyper, &mut progress)
}

pub fn continue_pretrain(
    source: &dyn PairSource,
    mut weights: MatcherWeights,
    hyper: &PretrainHyper,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    if source.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    if hyper.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut adam = Adam::new(hyper.lr);
    let mut losses = Vec::with_capacity(hyper.iterations);
    for it in 0..hyper.iterations {
        let mut rng = Rng::derive(hyper.seed, it as u64 + 1);
        let batch = (0..hyper.batch)
            .map(|_| source.sample_pair(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let loss = train_step(&mut weights, &batch, &mut adam)?;
        losses.push(loss);
        progress(it, loss);
    }
    Ok(PretrainOutcome { weights, losses })
}

/// Trailing moving average used to compare early and late training loss.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = i.saturating_sub(w - 1);
            let s = &losses[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}
