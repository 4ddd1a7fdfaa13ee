use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Target-specific extension of the matcher's last layer: extra 1×1
/// kernels and one sigmoid attention multiplier per output channel of the
/// concatenated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveState {
    target_kernels: Tensor,
    attention: Tensor,
}

impl AdaptiveState {
    /// `target_kernels` is `1×1×C_in×C_a`; `attention` has `C_base + C_a`
    /// entries in `(0, 1]`. The closed upper end admits the saturated
    /// multiplier 1.0 used for neutral states.
    pub fn new(target_kernels: Tensor, attention: Tensor) -> Result<Self> {
        let shape = target_kernels.shape();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
            return Err(Error::geometry(
                "AdaptiveState",
                format!("target kernels must be 1x1xCinxCa, got {shape:?}"),
            ));
        }
        if attention.rank() != 1 || attention.len() <= shape[3] {
            return Err(Error::geometry(
                "AdaptiveState",
                format!(
                    "attention of shape {:?} cannot cover {} adaptive channels plus base",
                    attention.shape(),
                    shape[3]
                ),
            ));
        }
        if let Some(v) = attention.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::invalid(format!(
                "attention multiplier {v} outside (0, 1]"
            )));
        }
        Ok(AdaptiveState {
            target_kernels,
            attention,
        })
    }

    /// Zero extra kernels with unit attention: leaves every response
    /// unchanged.
    pub fn neutral(in_channels: usize, base_channels: usize, adaptive_channels: usize) -> Self {
        AdaptiveState {
            target_kernels: Tensor::zeros(vec![1, 1, in_channels, adaptive_channels]),
            attention: Tensor::ones(vec![base_channels + adaptive_channels]),
        }
    }

    pub fn target_kernels(&self) -> &Tensor {
        &self.target_kernels
    }

    pub fn attention(&self) -> &Tensor {
        &self.attention
    }

    pub fn in_channels(&self) -> usize {
        self.target_kernels.shape()[2]
    }

    pub fn adaptive_channels(&self) -> usize {
        self.target_kernels.shape()[3]
    }

    pub fn total_channels(&self) -> usize {
        self.attention.len()
    }

    pub fn bit_eq(&self, other: &AdaptiveState) -> bool {
        self.target_kernels.bit_eq(&other.target_kernels) && self.attention.bit_eq(&other.attention)
    }
}
