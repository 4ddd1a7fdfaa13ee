use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::Manifest;

/// Everything that determines a synthetic sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub target_w: f64,
    pub target_h: f64,
    /// Velocity cap in pixels per frame.
    pub max_speed: f64,
    /// Std of the per-frame velocity change.
    pub accel: f64,
    /// Fraction of the way to an alternate palette the target moves per frame.
    pub drift: f64,
    /// Std of the per-frame log-size change.
    pub scale_walk: f64,
    pub distractors: usize,
    /// 0 = background statistics, 1 = target statistics.
    pub similarity: f64,
    /// Inclusive frame range during which the occluder covers the target.
    pub occlusion: Option<(usize, usize)>,
    pub blur: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            width: 128,
            height: 128,
            length: 100,
            target_w: 16.0,
            target_h: 16.0,
            max_speed: 2.0,
            accel: 0.5,
            drift: 0.0,
            scale_walk: 0.0,
            distractors: 0,
            similarity: 0.0,
            occlusion: None,
            blur: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

pub const MIN_TARGET: f64 = 4.0;

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.length == 0 || self.width == 0 || self.height == 0 {
            return bad("frame size and length must be positive".into());
        }
        let shrink = if self.scale_walk > 0.0 {
            MIN_SCALE
        } else {
            1.0
        };
        if self.target_w * shrink < MIN_TARGET || self.target_h * shrink < MIN_TARGET {
            return bad(format!(
                "target {}x{} can shrink below {MIN_TARGET}px",
                self.target_w, self.target_h
            ));
        }
        // Room for the largest size the scale walk can reach.
        if self.target_w * MAX_SCALE > self.width as f64
            || self.target_h * MAX_SCALE > self.height as f64
        {
            return bad(format!(
                "target {}x{} does not fit a {}x{} frame",
                self.target_w, self.target_h, self.width, self.height
            ));
        }
        for (name, v) in [
            ("max_speed", self.max_speed),
            ("accel", self.accel),
            ("drift", self.drift),
            ("scale_walk", self.scale_walk),
            ("blur", self.blur),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return bad(format!("similarity {} outside [0, 1]", self.similarity));
        }
        if let Some((a, b)) = self.occlusion {
            if a > b || b >= self.length {
                return bad(format!("occlusion {a}-{b} outside 0-{}", self.length - 1));
            }
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("width", self.width);
        m.set("height", self.height);
        m.set("length", self.length);
        m.set("target_w", self.target_w);
        m.set("target_h", self.target_h);
        m.set("max_speed", self.max_speed);
        m.set("accel", self.accel);
        m.set("drift", self.drift);
        m.set("scale_walk", self.scale_walk);
        m.set("distractors", self.distractors);
        m.set("similarity", self.similarity);
        m.set(
            "occlusion",
            match self.occlusion {
                Some((a, b)) => format!("{a}-{b}"),
                None => "none".into(),
            },
        );
        m.set("blur", self.blur);
        m.set("noise", self.noise);
        m.set("seed", self.seed);
        m
    }

    pub fn from_manifest(m: &Manifest, origin: &Path) -> Result<Self> {
        let occlusion = match m.require("occlusion")? {
            "none" => None,
            s => {
                let parsed = s
                    .split_once('-')
                    .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
                Some(parsed.ok_or_else(|| Error::Format {
                    path: origin.to_path_buf(),
                    detail: format!("occlusion {s:?} is not `start-end` or `none`"),
                })?)
            }
        };
        let spec = WorldSpec {
            width: m.parse_value("width")?,
            height: m.parse_value("height")?,
            length: m.parse_value("length")?,
            target_w: m.parse_value("target_w")?,
            target_h: m.parse_value("target_h")?,
            max_speed: m.parse_value("max_speed")?,
            accel: m.parse_value("accel")?,
            drift: m.parse_value("drift")?,
            scale_walk: m.parse_value("scale_walk")?,
            distractors: m.parse_value("distractors")?,
            similarity: m.parse_value("similarity")?,
            occlusion,
            blur: m.parse_value("blur")?,
            noise: m.parse_value("noise")?,
            seed: m.parse_value("seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Bounds of the size random walk relative to the initial size.
pub const MIN_SCALE: f64 = 0.7;
pub const MAX_SCALE: f64 = 1.4;
