//! Shared fixtures for the criterion benches.

use mlt_core::matcher::{MatcherConfig, MatcherWeights, Preset};
use mlt_core::meta::{MetaConfig, MetaWeights};
use mlt_core::tracker::TrackerParams;
use mlt_core::world::{generate_named, AnnotatedSequence, WorldSpec};
use mlt_core::{Result, Rng, Tensor};

/// Randomly initialised desk-preset models and a short synthetic sequence.
pub struct Fixture {
    pub matcher: MatcherWeights,
    pub meta: MetaWeights,
    pub params: TrackerParams,
    pub sequence: AnnotatedSequence,
}

impl Fixture {
    pub fn desk(frames: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let matcher = MatcherWeights::init(&MatcherConfig::desk(), &mut rng)?;
        let meta = MetaWeights::init(&MetaConfig::desk(), &mut rng)?;
        let spec = WorldSpec {
            length: frames,
            distractors: 2,
            similarity: 0.5,
            seed,
            ..WorldSpec::default()
        };
        Ok(Fixture {
            matcher,
            meta,
            params: TrackerParams::for_preset(Preset::Desk),
            sequence: generate_named(&spec, "bench".into())?,
        })
    }

    /// Exemplar crop of the first annotated box.
    pub fn exemplar(&self) -> Result<Tensor> {
        let rule = self.matcher.config().crop_rule();
        rule.exemplar(&self.sequence.frames[0], &self.sequence.boxes[0])
    }

    /// Search crop centred on the box in `frame`.
    pub fn search(&self, frame: usize) -> Result<Tensor> {
        let rule = self.matcher.config().crop_rule();
        let b = &self.sequence.boxes[frame];
        let (cx, cy) = b.center();
        rule.search(&self.sequence.frames[frame], cx, cy, b.w, b.h, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_crops_have_the_configured_sizes() {
        let f = Fixture::desk(4, 3).unwrap();
        let x = f.exemplar().unwrap();
        let z = f.search(2).unwrap();
        assert_eq!(x.shape()[0], 32);
        assert_eq!(z.shape()[0], 64);
    }
}
