//! Gradient input, weight generation and adapted scoring.

use super::weights::MetaWeights;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matcher::{AdaptiveState, AdaptiveVars, LabelMap, MatcherWeights, Mode, Trainable};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Frozen-matcher activations of one patch: the input to the last layer
/// and that layer's (pre-attention) output.
#[derive(Clone, Debug)]
pub struct PatchCache {
    pub penultimate: Tensor,
    pub base: Tensor,
}

impl PatchCache {
    pub fn new(matcher: &MatcherWeights, image: &Tensor) -> Result<Self> {
        let penultimate = matcher.penultimate(image)?;
        let mut tape = Tape::new();
        let bound = matcher.bind(&mut tape, Trainable::Nothing);
        let pen = tape.constant(penultimate.clone());
        let n = matcher.layers().len();
        let (base, _) = matcher.run_layers(&mut tape, &bound, n - 1..n, &[pen], Mode::Eval)?;
        Ok(PatchCache {
            base: tape.value(base[0]).clone(),
            penultimate,
        })
    }
}

/// δ: the negated mean gradient of the loss with respect to the last
/// kernel, over `z_set` with each target assumed at the patch center.
/// Always uses the matcher without adaptation.
pub fn compute_delta(matcher: &MatcherWeights, x: &Tensor, z_set: &[Tensor]) -> Result<Tensor> {
    if z_set.is_empty() {
        return Err(Error::invalid("compute_delta needs at least one patch"));
    }
    let xc = PatchCache::new(matcher, x)?;
    let zc = z_set
        .iter()
        .map(|z| PatchCache::new(matcher, z))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PatchCache> = zc.iter().collect();
    delta_from_caches(matcher, &xc, &refs)
}

pub fn delta_from_caches(
    matcher: &MatcherWeights,
    x: &PatchCache,
    zs: &[&PatchCache],
) -> Result<Tensor> {
    if zs.is_empty() {
        return Err(Error::invalid("compute_delta needs at least one patch"));
    }
    let label = LabelMap::centered(matcher.config())?;
    let mut tape = Tape::new();
    let bound = matcher.bind(&mut tape, Trainable::LastKernel);
    let n = matcher.layers().len();
    let pens: Vec<Var> = std::iter::once(x)
        .chain(zs.iter().copied())
        .map(|c| tape.constant(c.penultimate.clone()))
        .collect();
    let (bases, _) = matcher.run_layers(&mut tape, &bound, n - 1..n, &pens, Mode::Eval)?;
    let mut feats = Vec::with_capacity(pens.len());
    for (&b, &p) in bases.iter().zip(&pens) {
        feats.push(matcher.finish_features(&mut tape, b, p, None, None)?);
    }
    let mut losses = Vec::with_capacity(zs.len());
    for &fz in &feats[1..] {
        let r = matcher.response_on_tape(&mut tape, feats[0], fz)?;
        losses.push(tape.logistic_loss(r, label.labels(), label.weights())?);
    }
    let total = tape.add_all(&losses)?;
    let mean = tape.scale(total, -1.0 / zs.len() as f64)?;
    let kernel = bound.layers[n - 1].kernel;
    let mut grads = tape.backward(mean)?;
    grads
        .take(kernel)
        .ok_or_else(|| Error::invalid("no gradient reached the last kernel"))
}

/// Meta parameters recorded on a tape, in [`MetaWeights::params`] order.
#[derive(Clone, Debug)]
pub struct MetaBound {
    pub vars: Vec<Var>,
}

impl MetaWeights {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MetaBound {
        let vars = self
            .params()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        MetaBound { vars }
    }

    /// Records g_θ(δ) on `tape`. Dropout is active iff `rng` is given.
    pub fn generate_on_tape(
        &self,
        tape: &mut Tape,
        bound: &MetaBound,
        delta: &Tensor,
        rng: Option<&mut Rng>,
    ) -> Result<AdaptiveVars> {
        let c = self.config();
        delta.ensure_shape("generate", &c.delta_shape())?;
        let v = &bound.vars;
        let input = tape.constant(Tensor::new(
            vec![c.input_len()],
            delta.data().iter().map(|d| d * self.gain).collect(),
        )?);
        let mut rng = rng;
        let mut h = input;
        for (w, b) in [(v[0], v[1]), (v[2], v[3])] {
            h = tape.linear(h, w, b)?;
            h = tape.relu(h)?;
            if let Some(r) = rng.as_deref_mut() {
                h = tape.dropout(h, c.keep_prob, r)?;
            }
        }
        let k = tape.linear(h, v[4], v[5])?;
        let kernels = tape.reshape(k, &c.kernel_shape())?;
        let logits = tape.linear(h, v[6], v[7])?;
        let attention = tape.sigmoid(logits)?;
        Ok(AdaptiveVars { kernels, attention })
    }

    /// Adaptive state for δ. `Mode::Train` applies dropout and needs `rng`.
    pub fn generate(
        &self,
        delta: &Tensor,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<AdaptiveState> {
        let rng = match (mode, rng) {
            (Mode::Eval, _) => None,
            (Mode::Train, Some(r)) => Some(r),
            (Mode::Train, None) => {
                return Err(Error::invalid("train-mode generation needs an rng"))
            }
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.generate_on_tape(&mut tape, &bound, delta, rng)?;
        let kernels = tape.value(out.kernels).clone();
        // Saturated logits may underflow to 0; keep multipliers strictly positive.
        let att = tape
            .value(out.attention)
            .data()
            .iter()
            .map(|a| a.max(f64::MIN_POSITIVE))
            .collect();
        AdaptiveState::new(
            kernels,
            Tensor::new(vec![self.config().attention_len()], att)?,
        )
    }
}

/// Mean loss of exemplar `x` against `patches` with the given labels,
/// optionally through adaptive vars already on the tape.
pub fn patch_loss_on_tape(
    matcher: &MatcherWeights,
    tape: &mut Tape,
    adaptive: Option<AdaptiveVars>,
    x: &PatchCache,
    patches: &[&PatchCache],
    labels: &[LabelMap],
) -> Result<Var> {
    if patches.is_empty() || patches.len() != labels.len() {
        return Err(Error::invalid("patch and label counts differ"));
    }
    let feat = |tape: &mut Tape, c: &PatchCache| -> Result<Var> {
        let b = tape.constant(c.base.clone());
        let p = tape.constant(c.penultimate.clone());
        matcher.finish_features(tape, b, p, adaptive, None)
    };
    let fx = feat(tape, x)?;
    let mut losses = Vec::with_capacity(patches.len());
    for (c, l) in patches.iter().zip(labels) {
        let fz = feat(tape, c)?;
        let r = matcher.response_on_tape(tape, fx, fz)?;
        losses.push(tape.logistic_loss(r, l.labels(), l.weights())?);
    }
    let total = tape.add_all(&losses)?;
    tape.scale(total, 1.0 / patches.len() as f64)
}
