//! Named collections of synthetic sequences.

use super::render::{generate_named, AnnotatedSequence};
use super::spec::WorldSpec;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A list of named specs; generation is pure, so a suite is fully described
/// by its specs.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: String,
    pub entries: Vec<(String, WorldSpec)>,
}

pub const SUITE_NAMES: [&str; 2] = ["easy", "distractors"];

impl Suite {
    /// Shipped suites: `easy` (10 × 300 frames) and `distractors`
    /// (20 × 300 frames).
    pub fn builtin(name: &str) -> Result<Suite> {
        match name {
            "easy" => Ok(Suite::easy(10, 300, 1000)),
            "distractors" => Ok(Suite::distractors(20, 300, 2000)),
            other => Err(Error::invalid(format!(
                "unknown suite {other:?} (expected one of {})",
                SUITE_NAMES.join(", ")
            ))),
        }
    }

    /// Lone target on a textured background with gentle motion and noise.
    pub fn easy(count: usize, length: usize, seed: u64) -> Suite {
        let entries = (0..count)
            .map(|i| {
                let mut r = Rng::derive(seed, i as u64);
                let spec = WorldSpec {
                    length,
                    target_w: r.uniform_in(14.0, 20.0).round(),
                    target_h: r.uniform_in(14.0, 20.0).round(),
                    max_speed: r.uniform_in(1.0, 2.0),
                    accel: 0.3,
                    drift: 0.002,
                    noise: 0.02,
                    seed: seed + i as u64,
                    ..WorldSpec::default()
                };
                (format!("easy-{i:02}"), spec)
            })
            .collect();
        Suite {
            name: "easy".into(),
            entries,
        }
    }

    /// Three to five look-alike distractors per sequence, with appearance
    /// drift, scale change and blur; every fourth sequence has an occlusion.
    pub fn distractors(count: usize, length: usize, seed: u64) -> Suite {
        let entries = (0..count)
            .map(|i| {
                let mut r = Rng::derive(seed, i as u64);
                let occlusion = (i % 4 == 3 && length >= 40).then(|| {
                    let start = length / 2;
                    (start, (start + 10).min(length - 1))
                });
                let spec = WorldSpec {
                    length,
                    target_w: r.uniform_in(14.0, 20.0).round(),
                    target_h: r.uniform_in(14.0, 20.0).round(),
                    max_speed: r.uniform_in(1.0, 2.5),
                    accel: 0.4,
                    drift: 0.005,
                    scale_walk: 0.01,
                    distractors: 3 + r.below(3),
                    similarity: r.uniform_in(0.6, 0.85),
                    occlusion,
                    blur: r.uniform_in(0.0, 0.8),
                    noise: 0.03,
                    seed: seed + i as u64,
                    ..WorldSpec::default()
                };
                (format!("distractors-{i:02}"), spec)
            })
            .collect();
        Suite {
            name: "distractors".into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncated(mut self, count: usize, length: Option<usize>) -> Suite {
        self.entries.truncate(count);
        if let Some(l) = length {
            for (_, s) in &mut self.entries {
                s.length = l;
                s.occlusion = s.occlusion.filter(|&(_, b)| b < l);
            }
        }
        self
    }

    pub fn generate(&self) -> Result<Vec<AnnotatedSequence>> {
        self.entries
            .iter()
            .map(|(n, s)| generate_named(s, n.clone()))
            .collect()
    }
}

/// Randomized specs for the training pool. Seeds come from a range disjoint
/// from the shipped suites.
pub fn training_specs(count: usize, length: usize, seed: u64) -> Vec<WorldSpec> {
    (0..count)
        .map(|i| {
            let mut r = Rng::derive(seed, i as u64);
            WorldSpec {
                length,
                target_w: r.uniform_in(12.0, 22.0).round(),
                target_h: r.uniform_in(12.0, 22.0).round(),
                max_speed: r.uniform_in(0.5, 3.0),
                accel: r.uniform_in(0.2, 0.6),
                drift: r.uniform_in(0.0, 0.01),
                scale_walk: r.uniform_in(0.0, 0.012),
                distractors: r.below(6),
                similarity: r.uniform_in(0.0, 0.9),
                blur: r.uniform_in(0.0, 0.8),
                noise: r.uniform_in(0.0, 0.03),
                seed: 1_000_000 + seed.wrapping_mul(10_000) + i as u64,
                ..WorldSpec::default()
            }
        })
        .collect()
}

pub fn training_pool(count: usize, length: usize, seed: u64) -> Result<Vec<AnnotatedSequence>> {
    training_specs(count, length, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| generate_named(s, format!("train-{i:03}")))
        .collect()
}
