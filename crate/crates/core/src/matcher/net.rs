//! Feature extraction and matching, built on the tape.
//!
//! Layer order per block: convolution, batch normalization, ReLU (all but
//! the last layer), optional max pooling. After the last layer the optional
//! adaptive channels are appended, channel attention is applied, and every
//! spatial location is ℓ2-normalized across channels.

use std::ops::Range;

use super::adaptive::AdaptiveState;
use super::weights::MatcherWeights;
use crate::autodiff::{kernels, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, deterministic.
    Eval,
}

/// Which matcher tensors become differentiable leaves when bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    All,
    LastKernel,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub kernel: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Matcher parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundMatcher {
    pub layers: Vec<LayerVars>,
}

impl BoundMatcher {
    /// Vars in [`MatcherWeights::params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.kernel, l.gamma, l.beta])
            .collect()
    }
}

/// Adaptive extension recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveVars {
    /// `1×1×C_in×C_a`.
    pub kernels: Var,
    /// `[C_base + C_a]` multipliers.
    pub attention: Var,
}

/// Output of a train-mode pass: one statistics record per layer.
pub type LayerStats = Vec<BatchStats>;

impl MatcherWeights {
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundMatcher {
        let n = self.layers().len();
        let layers = self
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let all = trainable == Trainable::All;
                let last_kernel = trainable == Trainable::LastKernel && i + 1 == n;
                let mut put = |t: &Tensor, train: bool| {
                    if train {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                };
                LayerVars {
                    kernel: put(&l.kernel, all || last_kernel),
                    gamma: put(&l.gamma, all),
                    beta: put(&l.beta, all),
                }
            })
            .collect();
        BoundMatcher { layers }
    }

    /// Records the adaptive state attached to these weights, if any.
    pub fn bind_adaptation(&self, tape: &mut Tape) -> Option<AdaptiveVars> {
        self.adaptation().map(|a| AdaptiveVars {
            kernels: tape.constant(a.target_kernels().clone()),
            attention: tape.constant(a.attention().clone()),
        })
    }

    /// Runs layers `range` over every input. In train mode the batch
    /// statistics of each layer span all inputs together.
    pub fn run_layers(
        &self,
        tape: &mut Tape,
        bound: &BoundMatcher,
        range: Range<usize>,
        inputs: &[Var],
        mode: Mode,
    ) -> Result<(Vec<Var>, LayerStats)> {
        let mut cur = inputs.to_vec();
        let mut stats = Vec::new();
        for li in range {
            let spec = self.config().layers[li];
            let vars = bound.layers[li];
            let layer = &self.layers()[li];
            let convs = cur
                .iter()
                .map(|&v| tape.conv2d(v, vars.kernel, spec.stride))
                .collect::<Result<Vec<_>>>()?;
            let normed = match mode {
                Mode::Eval => convs
                    .iter()
                    .map(|&v| {
                        tape.batchnorm_eval(
                            v,
                            vars.gamma,
                            vars.beta,
                            layer.running_mean.data(),
                            layer.running_var.data(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
                Mode::Train => {
                    let shapes: Vec<Vec<usize>> = convs
                        .iter()
                        .map(|v| tape.value(*v).shape().to_vec())
                        .collect();
                    let packed = tape.pack_rows(&convs)?;
                    let (bn, st) = tape.batchnorm_train(packed, vars.gamma, vars.beta)?;
                    stats.push(st);
                    let mut off = 0;
                    let mut outs = Vec::with_capacity(shapes.len());
                    for s in &shapes {
                        outs.push(tape.slice_rows(bn, off, s)?);
                        off += s.iter().product::<usize>();
                    }
                    outs
                }
            };
            cur = normed
                .into_iter()
                .map(|v| {
                    let v = if spec.relu { tape.relu(v)? } else { v };
                    match spec.pool {
                        Some(p) => tape.maxpool2d(v, p.kernel, p.stride),
                        None => Ok(v),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
        }
        Ok((cur, stats))
    }

    /// Appends adaptive channels, applies attention and normalizes.
    pub fn finish_features(
        &self,
        tape: &mut Tape,
        base: Var,
        penultimate: Var,
        adaptive: Option<AdaptiveVars>,
        attention_override: Option<Var>,
    ) -> Result<Var> {
        let mut feat = base;
        let mut attention = attention_override;
        if let Some(a) = adaptive {
            let extra = tape.conv2d(penultimate, a.kernels, 1)?;
            feat = tape.concat_channels(base, extra)?;
            attention = attention.or(Some(a.attention));
        }
        if let Some(att) = attention {
            feat = tape.channel_mul(feat, att)?;
        }
        tape.l2_normalize_channels(feat)
    }

    /// Full per-image feature pass on a tape.
    pub fn features_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundMatcher,
        adaptive: Option<AdaptiveVars>,
        images: &[Var],
        mode: Mode,
    ) -> Result<(Vec<Var>, LayerStats)> {
        let n = self.layers().len();
        let (pen, mut stats) = self.run_layers(tape, bound, 0..n - 1, images, mode)?;
        let (base, last_stats) = self.run_layers(tape, bound, n - 1..n, &pen, mode)?;
        stats.extend(last_stats);
        let feats = base
            .iter()
            .zip(&pen)
            .map(|(&b, &p)| self.finish_features(tape, b, p, adaptive, None))
            .collect::<Result<Vec<_>>>()?;
        Ok((feats, stats))
    }

    /// Scaled cross-correlation of exemplar features over search features.
    pub fn response_on_tape(&self, tape: &mut Tape, fx: Var, fz: Var) -> Result<Var> {
        let r = tape.cross_correlate(fx, fz)?;
        tape.scale(r, self.config().response_scale)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = image.hwc()?;
        let cfg = self.config();
        let ok = c == 3 && h == w && (h == cfg.exemplar_size || h == cfg.search_size);
        if !ok {
            return Err(Error::geometry(
                "extract_features",
                format!(
                    "input {h}x{w}x{c} is neither exemplar ({0}x{0}x3) nor search ({1}x{1}x3) sized",
                    cfg.exemplar_size, cfg.search_size
                ),
            ));
        }
        Ok(())
    }

    /// Normalized feature map of one image. `attention`, when given,
    /// replaces the multipliers of any attached adaptation and must have
    /// one entry per output channel. Train mode normalizes with this
    /// image's own statistics.
    pub fn extract_features(
        &self,
        image: &Tensor,
        attention: Option<&[f64]>,
        mode: Mode,
    ) -> Result<Tensor> {
        self.check_input(image)?;
        if let Some(att) = attention {
            if att.len() != self.output_channels() {
                return Err(Error::ShapeMismatch {
                    op: "extract_features",
                    expected: vec![self.output_channels()],
                    actual: vec![att.len()],
                });
            }
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let adaptive = self.bind_adaptation(&mut tape);
        let img = tape.constant(image.clone());
        let n = self.layers().len();
        let (pen, _) = self.run_layers(&mut tape, &bound, 0..n - 1, &[img], mode)?;
        let (base, _) = self.run_layers(&mut tape, &bound, n - 1..n, &pen, mode)?;
        let att = match attention {
            Some(a) => Some(tape.constant(Tensor::new(vec![a.len()], a.to_vec())?)),
            None => None,
        };
        let f = self.finish_features(&mut tape, base[0], pen[0], adaptive, att)?;
        Ok(tape.value(f).clone())
    }

    /// Eval-mode output of layers `1..N-1`, the input to the 1×1 last layer.
    pub fn penultimate(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let img = tape.constant(image.clone());
        let n = self.layers().len();
        let (pen, _) = self.run_layers(&mut tape, &bound, 0..n - 1, &[img], Mode::Eval)?;
        Ok(tape.value(pen[0]).clone())
    }

    /// Eval-mode features from a precomputed penultimate map.
    pub fn features_from_penultimate(&self, penultimate: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let adaptive = self.bind_adaptation(&mut tape);
        let pen = tape.constant(penultimate.clone());
        let n = self.layers().len();
        let (base, _) = self.run_layers(&mut tape, &bound, n - 1..n, &[pen], Mode::Eval)?;
        let f = self.finish_features(&mut tape, base[0], pen, adaptive, None)?;
        Ok(tape.value(f).clone())
    }

    /// Eval-mode response of exemplar `x` against search region `z`.
    pub fn match_pair(&self, x: &Tensor, z: &Tensor) -> Result<ResponseMap> {
        let fx = self.extract_features(x, None, Mode::Eval)?;
        self.respond(&fx, z)
    }

    /// Response of cached exemplar features against a search region.
    pub fn respond(&self, exemplar_features: &Tensor, z: &Tensor) -> Result<ResponseMap> {
        let fz = self.extract_features(z, None, Mode::Eval)?;
        self.response_from_features(exemplar_features, &fz)
    }

    pub fn response_from_features(&self, fx: &Tensor, fz: &Tensor) -> Result<ResponseMap> {
        let (h, w, c) = fx.hwc()?;
        let (sh, sw, sc) = fz.hwc()?;
        if c != sc || h > sh || w > sw {
            return Err(Error::ShapeMismatch {
                op: "response",
                expected: vec![sh, sw, c],
                actual: vec![h, w, sc],
            });
        }
        let k = self.config().response_scale;
        let scores = kernels::xcorr_forward(fx.data(), (h, w), fz.data(), (sh, sw), c)
            .into_iter()
            .map(|v| v * k)
            .collect();
        ResponseMap::new(sh - h + 1, sw - w + 1, scores)
    }

    /// Convenience: response with an explicit adaptive state (or none).
    pub fn match_with(
        &self,
        x: &Tensor,
        z: &Tensor,
        adaptive: Option<&AdaptiveState>,
    ) -> Result<ResponseMap> {
        match adaptive {
            Some(a) => self.adapt(a)?.match_pair(x, z),
            None => self.without_adaptation().match_pair(x, z),
        }
    }
}

/// Grid of raw matching scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
}

impl ResponseMap {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        if rows * cols != scores.len() || rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "ResponseMap",
                expected: vec![rows, cols],
                actual: vec![scores.len()],
            });
        }
        if let Some((index, value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: *value,
            });
        }
        Ok(ResponseMap { rows, cols, scores })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[r, c] => Self::new(r, c, t.data().to_vec()),
            s => Err(Error::geometry(
                "ResponseMap",
                format!("expected rank 2, got {s:?}"),
            )),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.scores[r * self.cols + c]
    }

    /// Sigmoid of every score.
    pub fn probabilities(&self) -> Vec<f64> {
        self.scores.iter().map(|s| kernels::sigmoid(*s)).collect()
    }

    /// Position of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.scores.iter().enumerate() {
            if *v > self.scores[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }

    pub fn center(&self) -> (usize, usize) {
        (self.rows / 2, self.cols / 2)
    }

    pub fn max_abs_diff(&self, other: &ResponseMap) -> f64 {
        self.scores
            .iter()
            .zip(&other.scores)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}
