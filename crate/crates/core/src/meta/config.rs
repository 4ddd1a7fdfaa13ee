use crate::error::{Error, Result};
use crate::matcher::{MatcherConfig, Preset};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub preset: Preset,
    /// Patches used to form the gradient input.
    pub m: usize,
    /// Patches the generated weights are scored on during training.
    pub m_prime: usize,
    pub hidden: [usize; 2],
    pub keep_prob: f64,
    pub adaptive_channels: usize,
    /// Input channels of the matcher's last layer.
    pub in_channels: usize,
    /// Output channels of the matcher's last layer.
    pub base_channels: usize,
}

impl MetaConfig {
    pub fn paper() -> Self {
        MetaConfig {
            preset: Preset::Paper,
            m: 8,
            m_prime: 16,
            hidden: [512, 512],
            keep_prob: 0.7,
            adaptive_channels: 32,
            in_channels: 256,
            base_channels: 192,
        }
    }

    pub fn desk() -> Self {
        MetaConfig {
            preset: Preset::Desk,
            m: 4,
            m_prime: 8,
            hidden: [64, 64],
            keep_prob: 0.7,
            adaptive_channels: 4,
            in_channels: 16,
            base_channels: 12,
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Length of the flattened gradient input.
    pub fn input_len(&self) -> usize {
        self.in_channels * self.base_channels
    }

    pub fn delta_shape(&self) -> [usize; 4] {
        [1, 1, self.in_channels, self.base_channels]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [1, 1, self.in_channels, self.adaptive_channels]
    }

    pub fn attention_len(&self) -> usize {
        self.base_channels + self.adaptive_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if self.m_prime < self.m {
            return Err(Error::invalid(format!(
                "M' = {} is smaller than M = {}",
                self.m_prime, self.m
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::invalid(format!(
                "keep_prob {} outside (0, 1]",
                self.keep_prob
            )));
        }
        if self.hidden.contains(&0) || self.adaptive_channels == 0 {
            return Err(Error::invalid(
                "hidden widths and adaptive channels must be positive",
            ));
        }
        Ok(())
    }

    /// Checks that this learner fits the given matcher's last layer.
    pub fn check_matcher(&self, matcher: &MatcherConfig) -> Result<()> {
        if matcher.penultimate_channels() != self.in_channels
            || matcher.base_channels() != self.base_channels
            || matcher.last_layer().kernel != 1
        {
            return Err(Error::ShapeMismatch {
                op: "meta_config",
                expected: vec![1, 1, self.in_channels, self.base_channels],
                actual: vec![
                    matcher.last_layer().kernel,
                    matcher.last_layer().kernel,
                    matcher.penultimate_channels(),
                    matcher.base_channels(),
                ],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_shapes() {
        let c = MetaConfig::paper();
        assert_eq!(c.kernel_shape(), [1, 1, 256, 32]);
        assert_eq!(c.attention_len(), 224);
        assert_eq!(c.input_len(), 256 * 192);
        c.check_matcher(&MatcherConfig::paper()).unwrap();
    }

    #[test]
    fn desk_shapes() {
        let c = MetaConfig::desk();
        assert_eq!(c.attention_len(), 16);
        c.check_matcher(&MatcherConfig::desk()).unwrap();
        assert!(c.check_matcher(&MatcherConfig::paper()).is_err());
    }

    #[test]
    fn m_prime_below_m_is_rejected() {
        let mut c = MetaConfig::desk();
        c.m_prime = 3;
        assert!(c.validate().is_err());
    }
}
