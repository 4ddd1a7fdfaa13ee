use super::config::{LossWeighting, MatcherConfig};
use super::net::ResponseMap;
use crate::autodiff::kernels;
use crate::error::{Error, Result};

/// ±1 ground-truth map with per-position loss weights ζ.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    rows: usize,
    cols: usize,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

impl LabelMap {
    /// +1 within Chebyshev `radius` of `target`, −1 elsewhere.
    ///
    /// Balanced weighting gives ζ(+1) = |P|/(2·n₊) and ζ(−1) = |P|/(2·n₋),
    /// so each class contributes |P|/2 and the weights sum to |P|.
    pub fn new(
        rows: usize,
        cols: usize,
        target: (usize, usize),
        radius: usize,
        weighting: LossWeighting,
    ) -> Result<Self> {
        let (tr, tc) = target;
        if tr >= rows || tc >= cols {
            return Err(Error::geometry(
                "make_label",
                format!("target ({tr}, {tc}) outside {rows}x{cols} grid"),
            ));
        }
        let mut labels = vec![-1.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if r.abs_diff(tr) <= radius && c.abs_diff(tc) <= radius {
                    labels[r * cols + c] = 1.0;
                }
            }
        }
        let total = (rows * cols) as f64;
        let n_pos = labels.iter().filter(|v| **v > 0.0).count() as f64;
        let n_neg = total - n_pos;
        let weights = labels
            .iter()
            .map(|&y| match weighting {
                LossWeighting::Uniform => 1.0,
                LossWeighting::Balanced if n_neg == 0.0 => 1.0,
                LossWeighting::Balanced if y > 0.0 => total / (2.0 * n_pos),
                LossWeighting::Balanced => total / (2.0 * n_neg),
            })
            .collect();
        Ok(LabelMap {
            rows,
            cols,
            labels,
            weights,
        })
    }

    /// Label at the response center, as assumed for memory samples.
    pub fn centered(config: &MatcherConfig) -> Result<Self> {
        let n = config.response_size()?;
        Self::new(n, n, (n / 2, n / 2), config.label_radius, config.weighting)
    }

    pub fn for_config(config: &MatcherConfig, target: (usize, usize)) -> Result<Self> {
        let n = config.response_size()?;
        Self::new(n, n, target, config.label_radius, config.weighting)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|v| **v > 0.0).count()
    }
}

/// Weighted logistic loss of a response against a label map.
pub fn loss(resp: &ResponseMap, label: &LabelMap) -> Result<f64> {
    if (resp.rows(), resp.cols()) != (label.rows, label.cols) {
        return Err(Error::ShapeMismatch {
            op: "loss",
            expected: vec![label.rows, label.cols],
            actual: vec![resp.rows(), resp.cols()],
        });
    }
    Ok(kernels::logistic_loss(
        resp.scores(),
        &label.labels,
        &label.weights,
    ))
}
