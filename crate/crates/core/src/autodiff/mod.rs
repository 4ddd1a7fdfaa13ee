//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] records every primitive application in execution order, so
//! node inputs always precede the node. [`Tape::backward`] walks the
//! record once in reverse and then clears it. A tape and its values form a
//! single-threaded unit; independent tapes may live on different threads.

pub mod kernels;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use kernels::ConvDims;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        dims: ConvDims,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    PackRows {
        inputs: Vec<Var>,
    },
    SliceRows {
        input: Var,
        offset: usize,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    ChannelMul {
        input: Var,
        scale: Var,
    },
    L2Norm {
        input: Var,
        norms: Vec<f64>,
    },
    CrossCorrelate {
        exemplar: Var,
        search: Var,
    },
    LogisticLoss {
        scores: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        k: f64,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Channel statistics measured by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.check_finite()?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc()?;
        let ks = self.value(kernel).shape().to_vec();
        let [k, k2, kcin, cout] = ks[..] else {
            return Err(Error::geometry(
                "conv2d",
                format!("kernel must be rank 4, got {ks:?}"),
            ));
        };
        if k != k2 {
            return Err(Error::geometry(
                "conv2d",
                "only square kernels are supported",
            ));
        }
        if kcin != cin {
            return Err(mismatch("conv2d", &[k, k, cin, cout], &ks));
        }
        let (Some(ho), Some(wo)) = (
            kernels::valid_out(h, k, stride),
            kernels::valid_out(w, k, stride),
        ) else {
            return Err(Error::geometry(
                "conv2d",
                format!("{h}x{w} input too small for {k}x{k} kernel at stride {stride}"),
            ));
        };
        let dims = ConvDims {
            h,
            w,
            cin,
            k,
            cout,
            stride,
            ho,
            wo,
        };
        let out =
            kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &dims);
        let rg = self.rg(input) || self.rg(kernel);
        self.push(
            Tensor::from_parts(vec![ho, wo, cout], out),
            Op::Conv2d {
                input,
                kernel,
                dims,
            },
            rg,
        )
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        let (Some(ho), Some(wo)) = (
            kernels::valid_out(h, k, stride),
            kernels::valid_out(w, k, stride),
        ) else {
            return Err(Error::geometry(
                "maxpool2d",
                format!("pooling window {k} larger than {h}x{w} input"),
            ));
        };
        let (out, argmax) =
            kernels::maxpool_forward(self.value(input).data(), (h, w, c), k, stride, (ho, wo));
        let rg = self.rg(input);
        self.push(
            Tensor::from_parts(vec![ho, wo, c], out),
            Op::MaxPool { input, argmax },
            rg,
        )
    }

    /// Stacks channel-last tensors sharing a channel count into one
    /// `[rows, C]` matrix, so statistics can span several feature maps.
    pub fn pack_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(first) = inputs.first() else {
            return Err(Error::invalid("pack_rows needs at least one input"));
        };
        let c = last_dim(self.value(*first));
        let mut data = Vec::new();
        for v in inputs {
            let t = self.value(*v);
            if last_dim(t) != c {
                return Err(mismatch("pack_rows", &[c], &[last_dim(t)]));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c;
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::PackRows {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Contiguous block of a packed matrix, starting at flat `offset`,
    /// reshaped to `shape`.
    pub fn slice_rows(&mut self, input: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(input);
        if offset + n > src.len() {
            return Err(Error::geometry("slice_rows", "slice exceeds packed tensor"));
        }
        let data = src.data()[offset..offset + n].to_vec();
        let rg = self.rg(input);
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::SliceRows { input, offset },
            rg,
        )
    }

    /// Batch normalization with statistics over every row of a `[N, C]`
    /// matrix (biased variance).
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let c = last_dim(x);
        self.value(gamma).ensure_shape("batchnorm", &[c])?;
        self.value(beta).ensure_shape("batchnorm", &[c])?;
        let n = x.len() / c;
        if n < 2 {
            return Err(Error::invalid(
                "train-mode batchnorm needs at least two rows",
            ));
        }
        let mut mean = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            for ((v, m), is) in row.iter().zip(&mean).zip(&inv_std) {
                xhat.push((v - m) * is);
            }
        }
        let out = kernels::channel_affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let shape = x.shape().to_vec();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let var_out = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((
            var_out,
            BatchStats {
                mean,
                var,
                count: n,
            },
        ))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let x = self.value(input);
        let c = last_dim(x);
        for t in [self.value(gamma), self.value(beta)] {
            t.ensure_shape("batchnorm", &[c])?;
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch("batchnorm", &[c], &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let mut xhat = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            for ((v, m), is) in row.iter().zip(running_mean).zip(&inv_std) {
                xhat.push((v - m) * is);
            }
        }
        let out = kernels::channel_affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let shape = x.shape().to_vec();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|v| v.max(0.0)).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        self.push(Tensor::from_parts(shape, out), Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|v| kernels::sigmoid(*v)).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid { input }, rg)
    }

    /// Inverted dropout: kept units are scaled by `1/keep_prob`, so the
    /// expected activation is unchanged and evaluation needs no rescaling.
    pub fn dropout(&mut self, input: Var, keep_prob: f64, rng: &mut Rng) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::invalid(format!(
                "keep_prob {keep_prob} outside (0, 1]"
            )));
        }
        let x = self.value(input);
        let n = x.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.uniform() < keep_prob {
                    1.0 / keep_prob
                } else {
                    0.0
                }
            })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Dropout { input, mask },
            rg,
        )
    }

    /// `y = x·W + b` with `x: [in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (din, dout) = match w.shape() {
            &[i, o] => (i, o),
            s => {
                return Err(Error::geometry(
                    "linear",
                    format!("weight must be rank 2, got {s:?}"),
                ))
            }
        };
        if x.len() != din {
            return Err(mismatch("linear", &[din], x.shape()));
        }
        b.ensure_shape("linear", &[dout])?;
        let out = kernels::linear_forward(x.data(), w.data(), b.data());
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            Tensor::from_parts(vec![dout], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    /// Concatenates two feature maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (h, w, ca) = self.value(a).hwc()?;
        let (hb, wb, cb) = self.value(b).hwc()?;
        if (h, w) != (hb, wb) {
            return Err(mismatch("concat_channels", &[h, w, cb], &[hb, wb, cb]));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(h * w * (ca + cb));
        for (pa, pb) in da.chunks_exact(ca).zip(db.chunks_exact(cb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(vec![h, w, ca + cb], out),
            Op::ConcatChannels { a, b },
            rg,
        )
    }

    /// Multiplies every channel of a channel-last map by `scale[c]`.
    pub fn channel_mul(&mut self, input: Var, scale: Var) -> Result<Var> {
        let x = self.value(input);
        let s = self.value(scale);
        let c = last_dim(x);
        if s.len() != c {
            return Err(mismatch("channel_mul", &[c], s.shape()));
        }
        let zeros = vec![0.0; c];
        let out = kernels::channel_affine(x.data(), s.data(), &zeros);
        let shape = x.shape().to_vec();
        let rg = self.rg(input) || self.rg(scale);
        self.push(
            Tensor::from_parts(shape, out),
            Op::ChannelMul { input, scale },
            rg,
        )
    }

    pub fn l2_normalize_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let c = last_dim(x);
        let (out, norms) = kernels::l2norm_forward(x.data(), c, L2_EPS);
        let shape = x.shape().to_vec();
        let rg = self.rg(input);
        self.push(
            Tensor::from_parts(shape, out),
            Op::L2Norm { input, norms },
            rg,
        )
    }

    pub fn cross_correlate(&mut self, exemplar: Var, search: Var) -> Result<Var> {
        let (h, w, c) = self.value(exemplar).hwc()?;
        let (sh, sw, sc) = self.value(search).hwc()?;
        if c != sc {
            return Err(mismatch("cross_correlate", &[sh, sw, c], &[sh, sw, sc]));
        }
        if h > sh || w > sw {
            return Err(Error::geometry(
                "cross_correlate",
                format!("exemplar {h}x{w} larger than search {sh}x{sw}"),
            ));
        }
        let out = kernels::xcorr_forward(
            self.value(exemplar).data(),
            (h, w),
            self.value(search).data(),
            (sh, sw),
            c,
        );
        let rg = self.rg(exemplar) || self.rg(search);
        self.push(
            Tensor::from_parts(vec![sh - h + 1, sw - w + 1], out),
            Op::CrossCorrelate { exemplar, search },
            rg,
        )
    }

    /// Weighted logistic loss of a score map against ±1 labels.
    pub fn logistic_loss(&mut self, scores: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let f = self.value(scores);
        if labels.len() != f.len() || weights.len() != f.len() {
            return Err(mismatch("logistic_loss", f.shape(), &[labels.len()]));
        }
        let loss = kernels::logistic_loss(f.data(), labels, weights);
        let rg = self.rg(scores);
        self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::LogisticLoss {
                scores,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x.shape(), y.shape()));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x.shape(), y.shape()));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, input: Var, k: f64) -> Result<Var> {
        let x = self.value(input);
        let out = x.scaled(k);
        let rg = self.rg(input);
        self.push(out, Op::Scale { input, k }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        let rg = self.rg(input);
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum { input }, rg)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Err(Error::invalid("add_all of no terms"));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape.to_vec())?;
        let rg = self.rg(input);
        self.push(out, Op::Reshape { input }, rg)
    }

    /// Reverse pass from a scalar `loss`. Leaves created with
    /// [`Tape::leaf`] receive their gradient; the tape is cleared.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || self.nodes.iter().all(|n| matches!(n.op, Op::Leaf)) {
            return Err(Error::EmptyTape);
        }
        let lshape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(lshape));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lshape, vec![1.0]));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, nodes: &[Node], v: Var, g: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(nodes[v.0].value.shape().to_vec(), g));
                }
            }
        };

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gt) = grads[idx].take() else {
                continue;
            };
            let g = gt.data();
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    dims,
                } => {
                    if nodes[input.0].requires_grad {
                        let gi = kernels::conv2d_backward_input(g, val(*kernel), dims);
                        accumulate(&mut grads, &nodes, *input, gi);
                    }
                    if nodes[kernel.0].requires_grad {
                        let gk = kernels::conv2d_backward_kernel(val(*input), g, dims);
                        accumulate(&mut grads, &nodes, *kernel, gk);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut gi = vec![0.0; nodes[input.0].value.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g[o];
                    }
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::PackRows { inputs } => {
                    let mut off = 0;
                    for v in inputs {
                        let n = nodes[v.0].value.len();
                        accumulate(&mut grads, &nodes, *v, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::SliceRows { input, offset } => {
                    let mut gi = vec![0.0; nodes[input.0].value.len()];
                    gi[*offset..*offset + g.len()].copy_from_slice(g);
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let n = (xhat.len() / c) as f64;
                    let gam = val(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dgamma[ch] += gr[ch] * xr[ch];
                            dbeta[ch] += gr[ch];
                        }
                    }
                    if nodes[input.0].requires_grad {
                        // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                        let mut gi = Vec::with_capacity(g.len());
                        for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                gi.push(
                                    gam[ch]
                                        * inv_std[ch]
                                        * (gr[ch] - dbeta[ch] / n - xr[ch] * dgamma[ch] / n),
                                );
                            }
                        }
                        accumulate(&mut grads, &nodes, *input, gi);
                    }
                    accumulate(&mut grads, &nodes, *gamma, dgamma);
                    accumulate(&mut grads, &nodes, *beta, dbeta);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let gam = val(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut gi = Vec::with_capacity(g.len());
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dgamma[ch] += gr[ch] * xr[ch];
                            dbeta[ch] += gr[ch];
                            gi.push(gr[ch] * gam[ch] * inv_std[ch]);
                        }
                    }
                    accumulate(&mut grads, &nodes, *input, gi);
                    accumulate(&mut grads, &nodes, *gamma, dgamma);
                    accumulate(&mut grads, &nodes, *beta, dbeta);
                }
                Op::Relu { input } => {
                    let gi = g
                        .iter()
                        .zip(val(*input))
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::Sigmoid { input } => {
                    let gi = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::Dropout { input, mask } => {
                    let gi = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = val(*input);
                    let w = val(*weight);
                    let dout = g.len();
                    if nodes[input.0].requires_grad {
                        let gi = w
                            .chunks_exact(dout)
                            .map(|row| row.iter().zip(g).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut grads, &nodes, *input, gi);
                    }
                    if nodes[weight.0].requires_grad {
                        let mut gw = Vec::with_capacity(w.len());
                        for xi in x {
                            gw.extend(g.iter().map(|gv| xi * gv));
                        }
                        accumulate(&mut grads, &nodes, *weight, gw);
                    }
                    accumulate(&mut grads, &nodes, *bias, g.to_vec());
                }
                Op::ConcatChannels { a, b } => {
                    let ca = last_dim(&nodes[a.0].value);
                    let cb = last_dim(&nodes[b.0].value);
                    let mut ga = Vec::with_capacity(nodes[a.0].value.len());
                    let mut gb = Vec::with_capacity(nodes[b.0].value.len());
                    for px in g.chunks_exact(ca + cb) {
                        ga.extend_from_slice(&px[..ca]);
                        gb.extend_from_slice(&px[ca..]);
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::ChannelMul { input, scale } => {
                    let s = val(*scale);
                    let x = val(*input);
                    let c = s.len();
                    let mut gs = vec![0.0; c];
                    let mut gi = Vec::with_capacity(g.len());
                    for (gr, xr) in g.chunks_exact(c).zip(x.chunks_exact(c)) {
                        for ch in 0..c {
                            gi.push(gr[ch] * s[ch]);
                            gs[ch] += gr[ch] * xr[ch];
                        }
                    }
                    accumulate(&mut grads, &nodes, *input, gi);
                    accumulate(&mut grads, &nodes, *scale, gs);
                }
                Op::L2Norm { input, norms } => {
                    let c = last_dim(&node.value);
                    let gi = kernels::l2norm_backward(g, node.value.data(), norms, c);
                    accumulate(&mut grads, &nodes, *input, gi);
                }
                Op::CrossCorrelate { exemplar, search } => {
                    let (h, w, c) = nodes[exemplar.0].value.hwc()?;
                    let (sh, sw, _) = nodes[search.0].value.hwc()?;
                    let (ge, gs) = kernels::xcorr_backward(
                        g,
                        val(*exemplar),
                        (h, w),
                        val(*search),
                        (sh, sw),
                        c,
                    );
                    accumulate(&mut grads, &nodes, *exemplar, ge);
                    accumulate(&mut grads, &nodes, *search, gs);
                }
                Op::LogisticLoss {
                    scores,
                    labels,
                    weights,
                } => {
                    let gi = kernels::logistic_loss_grad(val(*scores), labels, weights)
                        .into_iter()
                        .map(|v| v * g[0])
                        .collect();
                    accumulate(&mut grads, &nodes, *scores, gi);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, &nodes, *a, g.to_vec());
                    accumulate(&mut grads, &nodes, *b, g.to_vec());
                }
                Op::Mul { a, b } => {
                    let ga = g.iter().zip(val(*b)).map(|(p, q)| p * q).collect();
                    let gb = g.iter().zip(val(*a)).map(|(p, q)| p * q).collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::Scale { input, k } => {
                    accumulate(
                        &mut grads,
                        &nodes,
                        *input,
                        g.iter().map(|v| v * k).collect(),
                    );
                }
                Op::Sum { input } => {
                    let n = nodes[input.0].value.len();
                    accumulate(&mut grads, &nodes, *input, vec![g[0]; n]);
                }
                Op::Reshape { input } => {
                    accumulate(&mut grads, &nodes, *input, g.to_vec());
                }
            }
        }

        // Only leaf gradients are reported.
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        for g in grads.iter().flatten() {
            g.check_finite()?;
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
        assert!(tape.is_empty());
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let mut tape = Tape::new();
        let vals = [0.3, -1.2, 2.0];
        let x = tape.leaf(t(&[3], &vals));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &vals);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::EmptyTape)));
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::EmptyTape)));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-3.0, 2.5]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.5]);
    }

    #[test]
    fn dropout_rejects_bad_keep_prob() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![4]));
        let mut rng = Rng::new(0);
        assert!(tape.dropout(x, 0.0, &mut rng).is_err());
        assert!(tape.dropout(x, 1.5, &mut rng).is_err());
        let kept = tape.dropout(x, 1.0, &mut rng).unwrap();
        assert_eq!(tape.value(kept).data(), &[1.0; 4]);
    }

    #[test]
    fn batchnorm_train_normalizes_each_channel() {
        let mut rng = Rng::new(11);
        let data: Vec<f64> = (0..5 * 5 * 3).map(|_| rng.uniform_in(-3.0, 5.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[25, 3], &data));
        let gamma = tape.constant(Tensor::ones(vec![3]));
        let beta = tape.constant(Tensor::zeros(vec![3]));
        let (y, _) = tape.batchnorm_train(x, gamma, beta).unwrap();
        let out = tape.value(y).data();
        for ch in 0..3 {
            let col: Vec<f64> = out.chunks_exact(3).map(|r| r[ch]).collect();
            let mean = col.iter().sum::<f64>() / 25.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
            assert!(mean.abs() < 1e-9);
            // ε = 1e-5 shrinks the variance by var/(var+ε).
            let raw: Vec<f64> = data.chunks_exact(3).map(|r| r[ch]).collect();
            let rm = raw.iter().sum::<f64>() / 25.0;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 25.0;
            assert!((var - rv / (rv + BN_EPS)).abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn maxpool_constant_map() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![7, 7, 2], 0.25));
        let p = tape.maxpool2d(x, 3, 2).unwrap();
        assert_eq!(tape.value(p).shape(), &[3, 3, 2]);
        assert!(tape.value(p).data().iter().all(|v| *v == 0.25));
        let small = tape.constant(Tensor::ones(vec![2, 2, 1]));
        assert!(tape.maxpool2d(small, 3, 2).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 2], &[3.0, 4.0, 0.6, 0.8, 0.0, 0.0]));
        let y = tape.l2_normalize_channels(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
        assert!((out[2] - 0.6).abs() < 1e-12 && (out[3] - 0.8).abs() < 1e-12);
        assert_eq!(&out[4..], &[0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut kernel = vec![0.0; 9];
        for c in 0..3 {
            kernel[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 4, 3], &data));
        let k = tape.constant(t(&[1, 1, 3, 3], &kernel));
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_geometry_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![127, 127, 3]));
        let k = tape.constant(Tensor::zeros(vec![11, 11, 3, 2]));
        let y = tape.conv2d(x, k, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[59, 59, 2]);
        let bad = tape.constant(Tensor::zeros(vec![3, 3, 4, 2]));
        assert!(matches!(
            tape.conv2d(x, bad, 1),
            Err(Error::ShapeMismatch { .. })
        ));
        let big = tape.constant(Tensor::zeros(vec![200, 200, 3, 1]));
        assert!(matches!(
            tape.conv2d(x, big, 1),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn cross_correlate_full_window_is_squared_norm() {
        let mut rng = Rng::new(9);
        let data: Vec<f64> = (0..3 * 3 * 2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let e = tape.constant(t(&[3, 3, 2], &data));
        let r = tape.cross_correlate(e, e).unwrap();
        let expected: f64 = data.iter().map(|v| v * v).sum();
        assert_eq!(tape.value(r).shape(), &[1, 1]);
        assert!((tape.value(r).item() - expected).abs() < 1e-12);
        let small = tape.constant(Tensor::zeros(vec![2, 2, 2]));
        assert!(tape.cross_correlate(e, small).is_err());
    }
}
