use std::fmt;
use std::str::FromStr;

use crate::autodiff::kernels::valid_out;
use crate::error::{Error, Result};

/// Named network/geometry presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Full-size network: 127/255 inputs, 17×17 response.
    Paper,
    /// Small network for CPU-scale training and tests: 32/64 inputs.
    Desk,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?} (paper|desk)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pool: Option<PoolSpec>,
    pub relu: bool,
}

/// How the per-position loss weights ζ are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossWeighting {
    /// Positives and negatives each carry half of the total weight |P|.
    Balanced,
    /// ζ ≡ 1.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    pub preset: Preset,
    pub layers: Vec<LayerSpec>,
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Chebyshev radius (in response cells) of the positive label region.
    pub label_radius: usize,
    pub weighting: LossWeighting,
    /// Fixed multiplier on cross-correlation scores.
    pub response_scale: f64,
}

const POOL: Option<PoolSpec> = Some(PoolSpec {
    kernel: 3,
    stride: 2,
});

fn layer(
    kernel: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pool: Option<PoolSpec>,
    relu: bool,
) -> LayerSpec {
    LayerSpec {
        kernel,
        in_channels: cin,
        out_channels: cout,
        stride,
        pool,
        relu,
    }
}

impl MatcherConfig {
    /// 11×11×3×128, 5×5×128×256, 3×3×256×384, 3×3×384×256, 1×1×256×192 with
    /// 3/2 pooling after the first two layers; 127/255 inputs → 17×17.
    pub fn paper() -> Self {
        MatcherConfig {
            preset: Preset::Paper,
            layers: vec![
                layer(11, 3, 128, 2, POOL, true),
                layer(5, 128, 256, 1, POOL, true),
                layer(3, 256, 384, 1, None, true),
                layer(3, 384, 256, 1, None, true),
                layer(1, 256, 192, 1, None, false),
            ],
            exemplar_size: 127,
            search_size: 255,
            label_radius: 0,
            weighting: LossWeighting::Balanced,
            response_scale: 1.0,
        }
    }

    /// Same five-layer structure at 32/64 inputs. The first convolution
    /// keeps stride 1 because stride 2 leaves no room for layer 3 at 32 px.
    pub fn desk() -> Self {
        MatcherConfig {
            preset: Preset::Desk,
            layers: vec![
                layer(5, 3, 8, 1, POOL, true),
                layer(3, 8, 16, 1, POOL, true),
                layer(3, 16, 16, 1, None, true),
                layer(3, 16, 16, 1, None, true),
                layer(1, 16, 12, 1, None, false),
            ],
            exemplar_size: 32,
            search_size: 64,
            label_radius: 1,
            weighting: LossWeighting::Balanced,
            response_scale: 4.0,
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn last_layer(&self) -> &LayerSpec {
        self.layers.last().expect("validated config has layers")
    }

    /// Channels produced by the unadapted last layer.
    pub fn base_channels(&self) -> usize {
        self.last_layer().out_channels
    }

    /// Channels entering the last (1×1) layer.
    pub fn penultimate_channels(&self) -> usize {
        self.last_layer().in_channels
    }

    /// Spatial side of the feature map for a square input of side `input`.
    pub fn feature_size(&self, input: usize) -> Result<usize> {
        let mut s = input;
        for (i, l) in self.layers.iter().enumerate() {
            s = valid_out(s, l.kernel, l.stride).ok_or_else(|| {
                Error::geometry(
                    "feature_size",
                    format!("layer {} does not fit a {s}px map", i + 1),
                )
            })?;
            if let Some(p) = l.pool {
                s = valid_out(s, p.kernel, p.stride).ok_or_else(|| {
                    Error::geometry(
                        "feature_size",
                        format!("pool after layer {} does not fit", i + 1),
                    )
                })?;
            }
        }
        Ok(s)
    }

    /// Side of the square response map.
    pub fn response_size(&self) -> Result<usize> {
        let fx = self.feature_size(self.exemplar_size)?;
        let fz = self.feature_size(self.search_size)?;
        if fx > fz {
            return Err(Error::geometry(
                "response_size",
                "exemplar features larger than search features",
            ));
        }
        Ok(fz - fx + 1)
    }

    /// Input pixels per response cell.
    pub fn crop_rule(&self) -> crate::geom::CropRule {
        crate::geom::CropRule {
            exemplar_size: self.exemplar_size,
            search_size: self.search_size,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.stride * l.pool.map_or(1, |p| p.stride))
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("matcher needs at least one layer"));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::invalid(format!(
                    "layer channel chain broken: {} → {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        if self.layers[0].in_channels != 3 {
            return Err(Error::invalid("first layer must take RGB input"));
        }
        if self.last_layer().kernel != 1 {
            return Err(Error::invalid("last layer must be 1x1"));
        }
        if !(self.response_scale.is_finite() && self.response_scale > 0.0) {
            return Err(Error::invalid("response_scale must be positive"));
        }
        let r = self.response_size()?;
        if self.label_radius >= r {
            return Err(Error::invalid("label radius covers the whole response map"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_geometry_is_17() {
        let c = MatcherConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.feature_size(127).unwrap(), 8);
        assert_eq!(c.feature_size(255).unwrap(), 24);
        assert_eq!(c.response_size().unwrap(), 17);
        assert_eq!(c.total_stride(), 8);
        // Response cells span exactly the search/exemplar size difference.
        assert_eq!((17 - 1) * c.total_stride(), 255 - 127);
    }

    #[test]
    fn desk_geometry() {
        let c = MatcherConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.feature_size(32).unwrap(), 1);
        assert_eq!(c.feature_size(64).unwrap(), 9);
        assert_eq!(c.response_size().unwrap(), 9);
        assert_eq!(c.total_stride(), 4);
        assert_eq!((9 - 1) * c.total_stride(), 64 - 32);
        assert_eq!(c.layers.len(), 5);
        assert_eq!(c.last_layer().kernel, 1);
    }

    #[test]
    fn desk_with_strided_first_layer_does_not_fit() {
        let mut c = MatcherConfig::desk();
        c.layers[0].stride = 2;
        assert!(c.feature_size(32).is_err());
    }

    #[test]
    fn broken_channel_chain_rejected() {
        let mut c = MatcherConfig::desk();
        c.layers[2].in_channels = 7;
        assert!(c.validate().is_err());
    }
}
