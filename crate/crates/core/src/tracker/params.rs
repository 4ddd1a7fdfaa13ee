use crate::error::{Error, Result};
use crate::matcher::Preset;

/// Which of the three tracker variants runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Periodic meta-updates from the memory (MLT).
    Meta,
    /// Matching network with fixed weights (MLT-mt).
    MatchOnly,
    /// Matching network plus periodic Adam fine-tuning of the last kernel
    /// (MLT-mt+ft).
    Finetune,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Meta, Variant::MatchOnly, Variant::Finetune];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Meta => "MLT",
            Variant::MatchOnly => "MLT-mt",
            Variant::Finetune => "MLT-mt+ft",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerParams {
    /// Search scales; must contain 1.0.
    pub scales: Vec<f64>,
    pub scale_penalty: f64,
    pub scale_damping: f64,
    /// Weight γ of the Hann window in `h = (1−γ) + γ·hann`.
    pub window_influence: f64,
    /// Meta-update period T in frames.
    pub update_period: usize,
    /// Confidence threshold τ for storing a frame in memory.
    pub confidence_threshold: f64,
    /// Memory capacity K.
    pub memory_capacity: usize,
    /// Samples M drawn from memory per update.
    pub samples: usize,
    pub finetune_period: usize,
    pub finetune_iterations: usize,
    pub finetune_lr: f64,
    /// Bounds of the target size relative to the initial size.
    pub min_scale: f64,
    pub max_scale: f64,
}

impl TrackerParams {
    pub fn paper() -> Self {
        TrackerParams {
            scales: vec![1.0, 1.0 / 1.035, 1.035],
            scale_penalty: 0.97,
            scale_damping: 0.59,
            window_influence: 0.25,
            update_period: 30,
            confidence_threshold: 0.5,
            memory_capacity: 64,
            samples: 8,
            finetune_period: 50,
            finetune_iterations: 30,
            finetune_lr: 1e-3,
            min_scale: 0.2,
            max_scale: 5.0,
        }
    }

    /// `paper` preset values with the desk meta-learner's M = 4.
    pub fn desk() -> Self {
        TrackerParams {
            samples: 4,
            ..Self::paper()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !self.scales.contains(&1.0) {
            return bad(format!("scales {:?} must contain 1.0", self.scales));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("scales {:?} must be positive", self.scales));
        }
        if !(self.scale_penalty > 0.0 && self.scale_penalty <= 1.0) {
            return bad(format!(
                "scale_penalty {} outside (0, 1]",
                self.scale_penalty
            ));
        }
        if !(0.0..=1.0).contains(&self.scale_damping) {
            return bad(format!(
                "scale_damping {} outside [0, 1]",
                self.scale_damping
            ));
        }
        if !(0.0..=1.0).contains(&self.window_influence) {
            return bad(format!(
                "window_influence {} outside [0, 1]",
                self.window_influence
            ));
        }
        if self.update_period == 0 || self.finetune_period == 0 {
            return bad("update periods must be positive".into());
        }
        if self.samples == 0 || self.memory_capacity < self.samples {
            return bad(format!(
                "need 1 <= samples ({}) <= memory_capacity ({})",
                self.samples, self.memory_capacity
            ));
        }
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return bad(format!(
                "confidence_threshold {} outside [0, 1)",
                self.confidence_threshold
            ));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0 && self.max_scale >= 1.0) {
            return bad(format!(
                "size bounds [{}, {}] must bracket 1",
                self.min_scale, self.max_scale
            ));
        }
        if !(self.finetune_lr.is_finite() && self.finetune_lr > 0.0) {
            return bad(format!("finetune_lr {} must be positive", self.finetune_lr));
        }
        Ok(())
    }
}
