//! Episode-based training of θ against a frozen matcher.

use super::config::MetaConfig;
use super::learner::{delta_from_caches, patch_loss_on_tape, PatchCache};
use super::weights::MetaWeights;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::matcher::{LabelMap, MatcherWeights};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// An exemplar plus context patches from the same trajectory, each with
/// the response cell that holds the target.
#[derive(Clone, Debug)]
pub struct Episode {
    pub exemplar: Tensor,
    pub patches: Vec<Tensor>,
    pub targets: Vec<(usize, usize)>,
}

pub trait EpisodeSource {
    fn sample_episode(&self, m_prime: usize, rng: &mut Rng) -> Result<Episode>;

    fn is_empty(&self) -> bool;
}

/// Episode with frozen-matcher activations precomputed.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub exemplar: PatchCache,
    pub patches: Vec<PatchCache>,
    pub labels: Vec<LabelMap>,
}

impl PreparedEpisode {
    pub fn new(matcher: &MatcherWeights, episode: &Episode) -> Result<Self> {
        if episode.patches.len() != episode.targets.len() || episode.patches.is_empty() {
            return Err(Error::Data("episode patch and target counts differ".into()));
        }
        Ok(PreparedEpisode {
            exemplar: PatchCache::new(matcher, &episode.exemplar)?,
            patches: episode
                .patches
                .iter()
                .map(|p| PatchCache::new(matcher, p))
                .collect::<Result<_>>()?,
            labels: episode
                .targets
                .iter()
                .map(|t| LabelMap::for_config(matcher.config(), *t))
                .collect::<Result<_>>()?,
        })
    }

    /// δ over the patches at `subset`.
    pub fn delta(&self, matcher: &MatcherWeights, subset: &[usize]) -> Result<Tensor> {
        let zs: Vec<&PatchCache> = subset.iter().map(|&i| &self.patches[i]).collect();
        delta_from_caches(matcher, &self.exemplar, &zs)
    }

    fn all_patches(&self) -> Vec<&PatchCache> {
        self.patches.iter().collect()
    }
}

/// Mean over episodes of the adapted loss on every patch. Returns the
/// gradient with respect to θ when `grad` is set. Dropout is active iff
/// `rng` is given.
pub fn meta_objective(
    theta: &MetaWeights,
    matcher: &MatcherWeights,
    batch: &[(&PreparedEpisode, &Tensor)],
    rng: Option<&mut Rng>,
    grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty meta batch"));
    }
    let mut tape = Tape::new();
    let bound = theta.bind(&mut tape, grad);
    let mut rng = rng;
    let mut losses = Vec::with_capacity(batch.len());
    for (ep, delta) in batch {
        let adaptive = theta.generate_on_tape(&mut tape, &bound, delta, rng.as_deref_mut())?;
        losses.push(patch_loss_on_tape(
            matcher,
            &mut tape,
            Some(adaptive),
            &ep.exemplar,
            &ep.all_patches(),
            &ep.labels,
        )?);
    }
    let total = tape.add_all(&losses)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let value = tape.value(mean).item();
    if !grad {
        return Ok((value, None));
    }
    let mut g = tape.backward(mean)?;
    let grads = bound
        .vars
        .iter()
        .map(|v| {
            g.take(*v)
                .ok_or_else(|| Error::invalid("missing meta gradient"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, Some(grads)))
}

/// Loss of the matcher without adaptation on every patch of an episode.
pub fn unadapted_loss(matcher: &MatcherWeights, ep: &PreparedEpisode) -> Result<f64> {
    let mut tape = Tape::new();
    let l = patch_loss_on_tape(
        matcher,
        &mut tape,
        None,
        &ep.exemplar,
        &ep.all_patches(),
        &ep.labels,
    )?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Debug)]
pub struct MetaHyper {
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Episodes used to fix the input gain before training.
    pub calibration: usize,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub weights: MetaWeights,
    pub losses: Vec<f64>,
}

fn check_frozen(matcher: &MatcherWeights, config: &MetaConfig) -> Result<()> {
    config.validate()?;
    config.check_matcher(matcher.config())?;
    if matcher.adaptation().is_some() {
        return Err(Error::invalid(
            "meta-training needs the plain pretrained matcher",
        ));
    }
    Ok(())
}

/// Gain 1/rms(δ) over `episodes` calibration episodes, each using its
/// first M patches. Falls back to 1 when every δ is zero.
pub fn calibrate_gain(
    matcher: &MatcherWeights,
    source: &dyn EpisodeSource,
    config: &MetaConfig,
    episodes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let subset: Vec<usize> = (0..config.m).collect();
    let (mut sq, mut n) = (0.0, 0usize);
    for _ in 0..episodes {
        let ep = PreparedEpisode::new(matcher, &source.sample_episode(config.m_prime, rng)?)?;
        let d = ep.delta(matcher, &subset)?;
        sq += d.data().iter().map(|v| v * v).sum::<f64>();
        n += d.len();
    }
    let rms = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
    Ok(if rms > 0.0 { 1.0 / rms } else { 1.0 })
}

/// Trains θ. The matcher is borrowed immutably and never changes.
///
/// Stream `(seed, 0)` initializes θ and draws calibration episodes;
/// iteration `i` draws its episodes, z_δ subsets and dropout masks from
/// stream `(seed, i + 1)`.
pub fn meta_train(
    matcher: &MatcherWeights,
    source: &dyn EpisodeSource,
    config: &MetaConfig,
    hyper: &MetaHyper,
    mut progress: impl FnMut(usize, f64),
) -> Result<MetaOutcome> {
    check_frozen(matcher, config)?;
    if source.is_empty() {
        return Err(Error::Data("episode source is empty".into()));
    }
    if hyper.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng0 = Rng::derive(hyper.seed, 0);
    let mut theta = MetaWeights::init(config, &mut rng0)?;
    theta.gain = calibrate_gain(
        matcher,
        source,
        config,
        hyper.calibration.max(1),
        &mut rng0.fork(1),
    )?;
    let mut adam = Adam::new(hyper.lr);
    let mut losses = Vec::with_capacity(hyper.iterations);
    for it in 0..hyper.iterations {
        let mut rng = Rng::derive(hyper.seed, it as u64 + 1);
        let mut prepared = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            let ep =
                PreparedEpisode::new(matcher, &source.sample_episode(config.m_prime, &mut rng)?)?;
            let subset = rng.choose_distinct(config.m_prime, config.m);
            let delta = ep.delta(matcher, &subset)?;
            prepared.push((ep, delta));
        }
        let batch: Vec<(&PreparedEpisode, &Tensor)> =
            prepared.iter().map(|(e, d)| (e, d)).collect();
        let (loss, grads) = meta_objective(&theta, matcher, &batch, Some(&mut rng), true)?;
        let grads = grads.expect("requested");
        let grefs: Vec<&Tensor> = grads.iter().collect();
        adam.step(&mut theta.params_mut(), &grefs)?;
        losses.push(loss);
        progress(it, loss);
    }
    Ok(MetaOutcome {
        weights: theta,
        losses,
    })
}

/// Adapted and unadapted loss over all patches of one held-out episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeScore {
    pub adapted: f64,
    pub unadapted: f64,
}

impl EpisodeScore {
    pub fn improved(&self) -> bool {
        self.adapted < self.unadapted
    }
}

/// Scores an episode with δ taken from its first M patches and
/// deterministic generation.
pub fn evaluate_episode(
    matcher: &MatcherWeights,
    theta: &MetaWeights,
    episode: &Episode,
) -> Result<EpisodeScore> {
    let ep = PreparedEpisode::new(matcher, episode)?;
    let m = theta.config().m.min(ep.patches.len());
    let subset: Vec<usize> = (0..m).collect();
    let delta = ep.delta(matcher, &subset)?;
    let (adapted, _) = meta_objective(theta, matcher, &[(&ep, &delta)], None, false)?;
    Ok(EpisodeScore {
        adapted,
        unadapted: unadapted_loss(matcher, &ep)?,
    })
}
