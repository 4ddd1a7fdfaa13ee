//! Training pairs and meta-training episodes cut from sequences.

use super::render::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::image::{flip_horizontal, gaussian_blur};
use crate::matcher::{MatcherConfig, PairSource, TrainingPair};
use crate::meta::{Episode, EpisodeSource};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSampling {
    /// Largest frame distance between exemplar and search frames.
    pub max_gap: usize,
    /// Largest displacement of the target from the search center, in
    /// response cells.
    pub max_shift: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            max_gap: usize::MAX,
            max_shift: 1,
        }
    }
}

/// Search crop around the target of frame `t`, displaced by whole cells.
/// Returns the crop and the target's response cell.
fn shifted_search(
    seq: &AnnotatedSequence,
    config: &MatcherConfig,
    t: usize,
    (dr, dc): (i64, i64),
) -> Result<(Tensor, (usize, usize))> {
    let rule = config.crop_rule();
    let b = seq.boxes[t];
    let (cx, cy) = b.center();
    let side = rule.search_side(b.w, b.h);
    let px = side / config.search_size as f64 * config.total_stride() as f64;
    let z = rule.search(
        &seq.frames[t],
        cx + dc as f64 * px,
        cy + dr as f64 * px,
        b.w,
        b.h,
        1.0,
    )?;
    let n = config.response_size()? as i64;
    let (r, c) = (n / 2 - dr, n / 2 - dc);
    if r < 0 || c < 0 || r >= n || c >= n {
        return Err(Error::geometry(
            "sample",
            format!("shift ({dr}, {dc}) leaves the {n}x{n} grid"),
        ));
    }
    Ok((z, (r as usize, c as usize)))
}

fn draw_shift(max: usize, rng: &mut Rng) -> (i64, i64) {
    let m = max as i64;
    (rng.int_in(-m, m), rng.int_in(-m, m))
}

/// Exemplar from one frame, search region from another frame of the same
/// trajectory, and the target's cell in the response grid.
pub fn sample_training_pair(
    seq: &AnnotatedSequence,
    config: &MatcherConfig,
    sampling: &PairSampling,
    rng: &mut Rng,
) -> Result<TrainingPair> {
    let (i, j) = sample_frame_pair(seq.len(), sampling.max_gap, rng)?;
    let half = config.response_size()? / 2;
    let shift = draw_shift(sampling.max_shift.min(half), rng);
    let exemplar = config.crop_rule().exemplar(&seq.frames[i], &seq.boxes[i])?;
    let (search, target) = shifted_search(seq, config, j, shift)?;
    Ok(TrainingPair {
        exemplar,
        search,
        target,
    })
}

/// Exemplar frame uniform over the sequence, search frame uniform within
/// `max_gap` of it.
pub fn sample_frame_pair(len: usize, max_gap: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(Error::Data(format!("need at least 2 frames, got {len}")));
    }
    let i = rng.below(len);
    let lo = i.saturating_sub(max_gap);
    let hi = i.saturating_add(max_gap).min(len - 1);
    Ok((i, lo + rng.below(hi - lo + 1)))
}

/// Per-patch augmentation draws for meta-training episodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip_p: f64,
    pub noise_p: f64,
    pub noise_sigma: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    /// Largest translation, in response cells.
    pub max_shift: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flip_p: 0.5,
            noise_p: 0.5,
            noise_sigma: 0.05,
            blur_p: 0.3,
            blur_sigma: (0.5, 1.2),
            max_shift: 1,
        }
    }
}

impl Augment {
    pub fn disabled() -> Self {
        Augment {
            flip_p: 0.0,
            noise_p: 0.0,
            noise_sigma: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.0, 0.0),
            max_shift: 0,
        }
    }
}

/// Flip, noise and blur of one search patch; flipping mirrors the target
/// cell. Every draw is taken whether or not it is used so the stream stays
/// aligned across settings.
pub fn augment_patch(
    patch: &Tensor,
    target: (usize, usize),
    grid: usize,
    aug: &Augment,
    rng: &mut Rng,
) -> Result<(Tensor, (usize, usize))> {
    let flip = rng.uniform() < aug.flip_p;
    let noise = rng.uniform() < aug.noise_p;
    let blur = rng.uniform() < aug.blur_p;
    let sigma = rng.uniform_in(aug.blur_sigma.0, aug.blur_sigma.1);
    let mut out = patch.clone();
    let mut target = target;
    if flip {
        out = flip_horizontal(&out)?;
        target.1 = grid - 1 - target.1;
    }
    if blur && sigma > 0.0 {
        let (h, w, c) = out.hwc()?;
        gaussian_blur(out.data_mut(), h, w, c, sigma);
    }
    if noise && aug.noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += aug.noise_sigma * rng.normal();
        }
    }
    Ok((out, target))
}

/// Anchor exemplar plus `m_prime` augmented context patches. Frames are
/// drawn without replacement when the sequence is long enough and with
/// replacement otherwise.
pub fn sample_episode(
    seq: &AnnotatedSequence,
    config: &MatcherConfig,
    m_prime: usize,
    aug: &Augment,
    rng: &mut Rng,
) -> Result<Episode> {
    if seq.is_empty() || m_prime == 0 {
        return Err(Error::Data(
            "episode needs a non-empty sequence and M' > 0".into(),
        ));
    }
    let anchor = rng.below(seq.len());
    let frames: Vec<usize> = if seq.len() >= m_prime {
        rng.choose_distinct(seq.len(), m_prime)
    } else {
        (0..m_prime).map(|_| rng.below(seq.len())).collect()
    };
    let exemplar = config
        .crop_rule()
        .exemplar(&seq.frames[anchor], &seq.boxes[anchor])?;
    let grid = config.response_size()?;
    let shift_max = aug.max_shift.min(grid / 2);
    let mut patches = Vec::with_capacity(m_prime);
    let mut targets = Vec::with_capacity(m_prime);
    for t in frames {
        let shift = draw_shift(shift_max, rng);
        let (z, cell) = shifted_search(seq, config, t, shift)?;
        let (z, cell) = augment_patch(&z, cell, grid, aug, rng)?;
        patches.push(z);
        targets.push(cell);
    }
    Ok(Episode {
        exemplar,
        patches,
        targets,
    })
}

/// A set of sequences serving pairs and episodes, each draw picking a
/// sequence uniformly.
#[derive(Clone, Debug)]
pub struct SequencePool {
    pub sequences: Vec<AnnotatedSequence>,
    pub config: MatcherConfig,
    pub pairs: PairSampling,
    pub augment: Augment,
}

impl SequencePool {
    pub fn new(sequences: Vec<AnnotatedSequence>, config: &MatcherConfig) -> Self {
        SequencePool {
            sequences,
            config: config.clone(),
            pairs: PairSampling::default(),
            augment: Augment::default(),
        }
    }

    fn pick(&self, rng: &mut Rng) -> Result<&AnnotatedSequence> {
        if self.sequences.is_empty() {
            return Err(Error::Data("sequence pool is empty".into()));
        }
        Ok(&self.sequences[rng.below(self.sequences.len())])
    }
}

impl PairSource for SequencePool {
    fn sample_pair(&self, rng: &mut Rng) -> Result<TrainingPair> {
        let seq = self.pick(rng)?;
        sample_training_pair(seq, &self.config, &self.pairs, rng)
    }

    fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

impl EpisodeSource for SequencePool {
    fn sample_episode(&self, m_prime: usize, rng: &mut Rng) -> Result<Episode> {
        let seq = self.pick(rng)?;
        sample_episode(seq, &self.config, m_prime, &self.augment, rng)
    }

    fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate, WorldSpec};

    fn seq(len: usize, seed: u64) -> AnnotatedSequence {
        generate(&WorldSpec {
            length: len,
            seed,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn same_frame_unshifted_pair_is_centered() {
        let s = seq(1, 1);
        let cfg = MatcherConfig::desk();
        let s2 = AnnotatedSequence {
            frames: vec![s.frames[0].clone(), s.frames[0].clone()],
            boxes: vec![s.boxes[0]; 2],
            occluders: vec![None; 2],
            ..s
        };
        let sampling = PairSampling {
            max_gap: 0,
            max_shift: 0,
        };
        let p = sample_training_pair(&s2, &cfg, &sampling, &mut Rng::new(2)).unwrap();
        assert_eq!(p.target, (4, 4));
    }

    #[test]
    fn targets_stay_inside_the_grid() {
        let s = seq(30, 3);
        let cfg = MatcherConfig::desk();
        let sampling = PairSampling {
            max_gap: 10,
            max_shift: 100,
        };
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let p = sample_training_pair(&s, &cfg, &sampling, &mut rng).unwrap();
            assert!(p.target.0 < 9 && p.target.1 < 9);
            assert_eq!(p.search.shape(), &[64, 64, 3]);
            assert_eq!(p.exemplar.shape(), &[32, 32, 3]);
        }
    }

    #[test]
    fn frame_indices_cover_the_sequence_uniformly() {
        let len = 20;
        let n = 10_000;
        let mut rng = Rng::new(5);
        let mut first = vec![0usize; len];
        let mut second = vec![0usize; len];
        for _ in 0..n {
            let (i, j) = sample_frame_pair(len, usize::MAX, &mut rng).unwrap();
            first[i] += 1;
            second[j] += 1;
        }
        let expected = n as f64 / len as f64;
        // χ² with 19 degrees of freedom; 43.8 is the 0.999 quantile.
        for counts in [&first, &second] {
            let chi2: f64 = counts
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < 43.8, "chi2 = {chi2}");
        }
    }

    #[test]
    fn disabled_augmentation_gives_exact_context_crops() {
        let s = seq(10, 6);
        let cfg = MatcherConfig::desk();
        let ep = sample_episode(&s, &cfg, 4, &Augment::disabled(), &mut Rng::new(7)).unwrap();
        let rule = cfg.crop_rule();
        for (z, t) in ep.patches.iter().zip(&ep.targets) {
            assert_eq!(*t, (4, 4));
            let hit = s.boxes.iter().zip(&s.frames).any(|(b, f)| {
                let (cx, cy) = b.center();
                rule.search(f, cx, cy, b.w, b.h, 1.0).unwrap().bit_eq(z)
            });
            assert!(hit);
        }
    }

    #[test]
    fn flip_mirrors_the_target_cell() {
        let patch = Tensor::from_fn(vec![64, 64, 3], |i| (i % 13) as f64).unwrap();
        let aug = Augment {
            flip_p: 1.0,
            ..Augment::disabled()
        };
        let (once, t1) = augment_patch(&patch, (2, 1), 9, &aug, &mut Rng::new(1)).unwrap();
        assert_eq!(t1, (2, 7));
        let (twice, t2) = augment_patch(&once, t1, 9, &aug, &mut Rng::new(1)).unwrap();
        assert!(twice.bit_eq(&patch));
        assert_eq!(t2, (2, 1));
    }

    #[test]
    fn noise_moments_match_requested_sigma() {
        let patch = Tensor::filled(vec![64, 64, 3], 0.5);
        let aug = Augment {
            noise_p: 1.0,
            noise_sigma: 0.05,
            ..Augment::disabled()
        };
        let mut rng = Rng::new(8);
        let mut diffs = Vec::new();
        for _ in 0..4 {
            let (z, _) = augment_patch(&patch, (4, 4), 9, &aug, &mut rng).unwrap();
            diffs.extend(z.data().iter().map(|v| v - 0.5));
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05 * 0.05);
        assert!((sd / 0.05 - 1.0).abs() < 0.05);
    }

    #[test]
    fn short_sequences_fall_back_to_replacement() {
        let s = seq(3, 9);
        let cfg = MatcherConfig::desk();
        let ep = sample_episode(&s, &cfg, 8, &Augment::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(ep.patches.len(), 8);
    }
}
