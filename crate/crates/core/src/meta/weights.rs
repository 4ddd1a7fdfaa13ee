use std::fs;
use std::path::Path;

use super::config::MetaConfig;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::matcher::{CheckpointInfo, Preset};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Meta-learner parameters θ: two hidden layers and two output heads.
/// Linear weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaWeights {
    config: MetaConfig,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Kernel head.
    pub wk: Tensor,
    pub bk: Tensor,
    /// Attention head (logits).
    pub wa: Tensor,
    pub ba: Tensor,
    /// Fixed multiplier applied to δ before the first layer.
    pub gain: f64,
}

const KERNEL_HEAD_INIT: f64 = 1e-3;

const NAMES: [&str; 8] = ["w1", "b1", "w2", "b2", "wk", "bk", "wa", "ba"];

impl MetaWeights {
    /// He-normal trunk, small uniform kernel head, zero attention head.
    pub fn init(config: &MetaConfig, rng: &mut Rng) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let h1 = config.hidden[0];
        let fan1 = config.input_len() as f64;
        for v in w.w1.data_mut() {
            *v = rng.normal() * (2.0 / fan1).sqrt();
        }
        for v in w.w2.data_mut() {
            *v = rng.normal() * (2.0 / h1 as f64).sqrt();
        }
        for v in w.wk.data_mut() {
            *v = rng.uniform_in(-KERNEL_HEAD_INIT, KERNEL_HEAD_INIT);
        }
        Ok(w)
    }

    /// All-zero θ with unit gain.
    pub fn zeros(config: &MetaConfig) -> Result<Self> {
        config.validate()?;
        let [h1, h2] = config.hidden;
        let kout = config.in_channels * config.adaptive_channels;
        Ok(MetaWeights {
            config: config.clone(),
            w1: Tensor::zeros(vec![config.input_len(), h1]),
            b1: Tensor::zeros(vec![h1]),
            w2: Tensor::zeros(vec![h1, h2]),
            b2: Tensor::zeros(vec![h2]),
            wk: Tensor::zeros(vec![h2, kout]),
            bk: Tensor::zeros(vec![kout]),
            wa: Tensor::zeros(vec![h2, config.attention_len()]),
            ba: Tensor::zeros(vec![config.attention_len()]),
            gain: 1.0,
        })
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w1, &self.b1, &self.w2, &self.b2, &self.wk, &self.bk, &self.wa, &self.ba,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wk,
            &mut self.bk,
            &mut self.wa,
            &mut self.ba,
        ]
    }

    pub fn param_names() -> [&'static str; 8] {
        NAMES
    }

    pub fn bit_eq(&self, other: &MetaWeights) -> bool {
        self.config == other.config
            && self.gain.to_bits() == other.gain.to_bits()
            && self
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.bit_eq(b))
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = Self::zeros(&self.config)?;
        for (name, (a, b)) in NAMES
            .iter()
            .zip(self.params().iter().zip(reference.params()))
        {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "meta tensor {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::invalid(format!(
                "meta gain {} must be positive",
                self.gain
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, info: &CheckpointInfo) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let mut m = Manifest::new();
        m.set("kind", "meta");
        m.set("preset", c.preset);
        m.set("m", c.m);
        m.set("m_prime", c.m_prime);
        m.set("hidden1", c.hidden[0]);
        m.set("hidden2", c.hidden[1]);
        m.set("keep_prob", c.keep_prob);
        m.set("adaptive_channels", c.adaptive_channels);
        m.set("in_channels", c.in_channels);
        m.set("base_channels", c.base_channels);
        // Exact bit pattern so reloads reproduce tracking bit-for-bit.
        m.set("gain", format!("{:e}", self.gain));
        m.set("gain_bits", format!("{:016x}", self.gain.to_bits()));
        m.set("seed", info.seed);
        m.set("iterations", info.iterations);
        for (name, t) in NAMES.iter().zip(self.params()) {
            let file = format!("{name}.tensor");
            t.save(&dir.join(&file))?;
            m.set(&format!("tensor.{name}"), file);
        }
        m.save(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointInfo)> {
        let m = Manifest::load(&dir.join("manifest.txt"))?;
        let bad = |detail: String| Error::Format {
            path: dir.to_path_buf(),
            detail,
        };
        if m.require("kind")? != "meta" {
            return Err(bad("not a meta-learner checkpoint".into()));
        }
        let preset: Preset = m.require("preset")?.parse()?;
        let config = MetaConfig {
            preset,
            m: m.parse_value("m")?,
            m_prime: m.parse_value("m_prime")?,
            hidden: [m.parse_value("hidden1")?, m.parse_value("hidden2")?],
            keep_prob: m.parse_value("keep_prob")?,
            adaptive_channels: m.parse_value("adaptive_channels")?,
            in_channels: m.parse_value("in_channels")?,
            base_channels: m.parse_value("base_channels")?,
        };
        config.validate()?;
        let bits = u64::from_str_radix(m.require("gain_bits")?, 16)
            .map_err(|e| bad(format!("gain_bits: {e}")))?;
        let load = |name: &str| -> Result<Tensor> {
            Tensor::load(&dir.join(m.require(&format!("tensor.{name}"))?))
        };
        let w = MetaWeights {
            config,
            w1: load("w1")?,
            b1: load("b1")?,
            w2: load("w2")?,
            b2: load("b2")?,
            wk: load("wk")?,
            bk: load("bk")?,
            wa: load("wa")?,
            ba: load("ba")?,
            gain: f64::from_bits(bits),
        };
        w.check_shapes()?;
        let info = CheckpointInfo {
            seed: m.parse_value("seed")?,
            iterations: m.parse_value("iterations")?,
        };
        Ok((w, info))
    }
}
