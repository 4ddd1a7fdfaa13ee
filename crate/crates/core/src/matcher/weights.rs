use std::fs;
use std::path::Path;

use super::adaptive::AdaptiveState;
use super::config::{LossWeighting, MatcherConfig, Preset};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One convolution with its batch normalization. The normalization shift
/// doubles as the convolution bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherWeights {
    config: MatcherConfig,
    layers: Vec<ConvLayer>,
    adaptation: Option<AdaptiveState>,
}

/// Provenance recorded next to a checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub iterations: u64,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl MatcherWeights {
    /// He-normal kernels, identity normalization.
    pub fn init(config: &MatcherConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let fan_in = (l.kernel * l.kernel * l.in_channels) as f64;
                let std = (2.0 / fan_in).sqrt();
                let kernel = Tensor::from_fn(
                    vec![l.kernel, l.kernel, l.in_channels, l.out_channels],
                    |_| rng.normal() * std,
                )?;
                Ok(ConvLayer {
                    kernel,
                    gamma: Tensor::ones(vec![l.out_channels]),
                    beta: Tensor::zeros(vec![l.out_channels]),
                    running_mean: Tensor::zeros(vec![l.out_channels]),
                    running_var: Tensor::ones(vec![l.out_channels]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MatcherWeights {
            config: config.clone(),
            layers,
            adaptation: None,
        })
    }

    pub fn from_layers(config: &MatcherConfig, layers: Vec<ConvLayer>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layers.len() {
            return Err(Error::invalid(format!(
                "{} layers supplied for a {}-layer config",
                layers.len(),
                config.layers.len()
            )));
        }
        for (spec, l) in config.layers.iter().zip(&layers) {
            l.kernel.ensure_shape(
                "MatcherWeights",
                &[
                    spec.kernel,
                    spec.kernel,
                    spec.in_channels,
                    spec.out_channels,
                ],
            )?;
            for t in [&l.gamma, &l.beta, &l.running_mean, &l.running_var] {
                t.ensure_shape("MatcherWeights", &[spec.out_channels])?;
            }
            if l.running_var.data().iter().any(|v| *v < 0.0) {
                return Err(Error::invalid("negative running variance"));
            }
        }
        Ok(MatcherWeights {
            config: config.clone(),
            layers,
            adaptation: None,
        })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn last_kernel(&self) -> &Tensor {
        &self.layers.last().expect("non-empty").kernel
    }

    pub fn last_kernel_mut(&mut self) -> &mut Tensor {
        &mut self.layers.last_mut().expect("non-empty").kernel
    }

    pub fn adaptation(&self) -> Option<&AdaptiveState> {
        self.adaptation.as_ref()
    }

    /// Channels produced by the last layer, including adaptive ones.
    pub fn output_channels(&self) -> usize {
        self.config.base_channels()
            + self
                .adaptation
                .as_ref()
                .map_or(0, |a| a.adaptive_channels())
    }

    /// Copy whose last layer is `[w_N, w_target]` with the state's
    /// attention attached. Any previous adaptation is replaced.
    pub fn adapt(&self, state: &AdaptiveState) -> Result<MatcherWeights> {
        let cin = self.config.penultimate_channels();
        let cbase = self.config.base_channels();
        if state.in_channels() != cin {
            return Err(Error::ShapeMismatch {
                op: "adapt",
                expected: vec![1, 1, cin, state.adaptive_channels()],
                actual: state.target_kernels().shape().to_vec(),
            });
        }
        if state.total_channels() != cbase + state.adaptive_channels() {
            return Err(Error::ShapeMismatch {
                op: "adapt",
                expected: vec![cbase + state.adaptive_channels()],
                actual: state.attention().shape().to_vec(),
            });
        }
        Ok(MatcherWeights {
            config: self.config.clone(),
            layers: self.layers.clone(),
            adaptation: Some(state.clone()),
        })
    }

    pub fn without_adaptation(&self) -> MatcherWeights {
        MatcherWeights {
            config: self.config.clone(),
            layers: self.layers.clone(),
            adaptation: None,
        }
    }

    /// Trainable tensors in fixed order: per layer kernel, gamma, beta.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.kernel, &l.gamma, &l.beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.gamma, &mut l.beta])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (1..=self.layers.len())
            .flat_map(|i| {
                [
                    format!("conv{i}.kernel"),
                    format!("conv{i}.gamma"),
                    format!("conv{i}.beta"),
                ]
            })
            .collect()
    }

    /// Folds train-mode batch statistics into the running estimates.
    /// `var` is the biased batch variance over `count` rows.
    pub fn update_running_stats(&mut self, layer: usize, mean: &[f64], var: &[f64], count: usize) {
        let l = &mut self.layers[layer];
        let unbias = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for (r, m) in l.running_mean.data_mut().iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in l.running_var.data_mut().iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
        }
    }

    pub fn bit_eq(&self, other: &MatcherWeights) -> bool {
        self.config == other.config
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.kernel.bit_eq(&b.kernel)
                    && a.gamma.bit_eq(&b.gamma)
                    && a.beta.bit_eq(&b.beta)
                    && a.running_mean.bit_eq(&b.running_mean)
                    && a.running_var.bit_eq(&b.running_var)
            })
    }

    /// Writes tensor snapshots plus `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path, info: &CheckpointInfo) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = Manifest::new();
        m.set("kind", "matcher");
        m.set("preset", self.config.preset);
        m.set("label_radius", self.config.label_radius);
        m.set("response_scale", self.config.response_scale);
        m.set(
            "weighting",
            match self.config.weighting {
                LossWeighting::Balanced => "balanced",
                LossWeighting::Uniform => "uniform",
            },
        );
        m.set("seed", info.seed);
        m.set("iterations", info.iterations);
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("kernel", &l.kernel),
                ("gamma", &l.gamma),
                ("beta", &l.beta),
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ] {
                let key = format!("conv{}.{name}", i + 1);
                let file = format!("{key}.tensor");
                t.save(&dir.join(&file))?;
                m.set(&format!("tensor.{key}"), file);
            }
        }
        m.save(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointInfo)> {
        let m = Manifest::load(&dir.join("manifest.txt"))?;
        if m.require("kind")? != "matcher" {
            return Err(Error::Format {
                path: dir.to_path_buf(),
                detail: "not a matcher checkpoint".into(),
            });
        }
        let preset: Preset = m.require("preset")?.parse()?;
        let mut config = MatcherConfig::for_preset(preset);
        config.label_radius = m.parse_value("label_radius")?;
        config.response_scale = m.parse_value("response_scale")?;
        config.weighting = match m.require("weighting")? {
            "balanced" => LossWeighting::Balanced,
            "uniform" => LossWeighting::Uniform,
            other => {
                return Err(Error::Format {
                    path: dir.to_path_buf(),
                    detail: format!("unknown weighting {other:?}"),
                })
            }
        };
        let mut layers = Vec::with_capacity(config.layers.len());
        for i in 1..=config.layers.len() {
            let load = |name: &str| -> Result<Tensor> {
                let file = m.require(&format!("tensor.conv{i}.{name}"))?;
                Tensor::load(&dir.join(file))
            };
            layers.push(ConvLayer {
                kernel: load("kernel")?,
                gamma: load("gamma")?,
                beta: load("beta")?,
                running_mean: load("running_mean")?,
                running_var: load("running_var")?,
            });
        }
        let info = CheckpointInfo {
            seed: m.parse_value("seed")?,
            iterations: m.parse_value("iterations")?,
        };
        Ok((Self::from_layers(&config, layers)?, info))
    }
}
