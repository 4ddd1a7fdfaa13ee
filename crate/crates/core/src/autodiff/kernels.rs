//! Raw forward/backward kernels on channel-last slices.
//!
//! Shared by the tape and by the tape-free inference path so that both
//! compute bit-identical forward values.

/// Output side of a valid-padding window sweep, or `None` when the window
/// does not fit.
pub fn valid_out(size: usize, k: usize, stride: usize) -> Option<usize> {
    if k == 0 || stride == 0 || k > size {
        None
    } else {
        Some((size - k) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.ho * d.wo * d.cout];
    let kc = d.cin * d.cout;
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let o = &mut out[(oy * d.wo + ox) * d.cout..][..d.cout];
            for ky in 0..d.k {
                let iy = oy * d.stride + ky;
                for kx in 0..d.k {
                    let ix = ox * d.stride + kx;
                    let px = &input[(iy * d.w + ix) * d.cin..][..d.cin];
                    let kbase = (ky * d.k + kx) * kc;
                    for (ci, &a) in px.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * d.cout..][..d.cout];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += a * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut gin = vec![0.0; d.h * d.w * d.cin];
    let kc = d.cin * d.cout;
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let g = &grad_out[(oy * d.wo + ox) * d.cout..][..d.cout];
            for ky in 0..d.k {
                let iy = oy * d.stride + ky;
                for kx in 0..d.k {
                    let ix = ox * d.stride + kx;
                    let kbase = (ky * d.k + kx) * kc;
                    let gi = &mut gin[(iy * d.w + ix) * d.cin..][..d.cin];
                    for (ci, gv) in gi.iter_mut().enumerate() {
                        let krow = &kernel[kbase + ci * d.cout..][..d.cout];
                        let mut acc = 0.0;
                        for (a, b) in g.iter().zip(krow) {
                            acc += a * b;
                        }
                        *gv += acc;
                    }
                }
            }
        }
    }
    gin
}

pub fn conv2d_backward_kernel(input: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let kc = d.cin * d.cout;
    let mut gk = vec![0.0; d.k * d.k * kc];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let g = &grad_out[(oy * d.wo + ox) * d.cout..][..d.cout];
            for ky in 0..d.k {
                let iy = oy * d.stride + ky;
                for kx in 0..d.k {
                    let ix = ox * d.stride + kx;
                    let px = &input[(iy * d.w + ix) * d.cin..][..d.cin];
                    let kbase = (ky * d.k + kx) * kc;
                    for (ci, &a) in px.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let krow = &mut gk[kbase + ci * d.cout..][..d.cout];
                        for (kv, gv) in krow.iter_mut().zip(g) {
                            *kv += a * gv;
                        }
                    }
                }
            }
        }
    }
    gk
}

/// Max pooling; returns the pooled map and, per output element, the flat
/// input index that won. Ties go to the first element in scan order.
pub fn maxpool_forward(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
    (ho, wo): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let _ = h;
    let mut out = vec![f64::NEG_INFINITY; ho * wo * c];
    let mut arg = vec![0usize; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let obase = (oy * wo + ox) * c;
            for ky in 0..k {
                for kx in 0..k {
                    let ibase = ((oy * stride + ky) * w + ox * stride + kx) * c;
                    for ch in 0..c {
                        let v = input[ibase + ch];
                        if v > out[obase + ch] {
                            out[obase + ch] = v;
                            arg[obase + ch] = ibase + ch;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Valid cross-correlation of an exemplar map over a search map, summing
/// over channels. Output is `(H-h+1) × (W-w+1)`.
pub fn xcorr_forward(
    ex: &[f64],
    (h, w): (usize, usize),
    search: &[f64],
    (sh, sw): (usize, usize),
    c: usize,
) -> Vec<f64> {
    let (oh, ow) = (sh - h + 1, sw - w + 1);
    let mut out = vec![0.0; oh * ow];
    let row = w * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for ey in 0..h {
                let e = &ex[ey * row..][..row];
                let s = &search[((oy + ey) * sw + ox) * c..][..row];
                for (a, b) in e.iter().zip(s) {
                    acc += a * b;
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

pub fn xcorr_backward(
    grad: &[f64],
    ex: &[f64],
    (h, w): (usize, usize),
    search: &[f64],
    (sh, sw): (usize, usize),
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (sh - h + 1, sw - w + 1);
    let mut gex = vec![0.0; ex.len()];
    let mut gs = vec![0.0; search.len()];
    let row = w * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let g = grad[oy * ow + ox];
            if g == 0.0 {
                continue;
            }
            for ey in 0..h {
                let soff = ((oy + ey) * sw + ox) * c;
                let eoff = ey * row;
                for i in 0..row {
                    gex[eoff + i] += g * search[soff + i];
                    gs[soff + i] += g * ex[eoff + i];
                }
            }
        }
    }
    (gex, gs)
}

/// Per-location channel normalization `x / sqrt(|x|² + eps)`. Returns the
/// output and the per-location denominators.
pub fn l2norm_forward(input: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; input.len()];
    let mut norms = Vec::with_capacity(input.len() / c.max(1));
    for (x, y) in input.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let n = (x.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = xi / n;
        }
        norms.push(n);
    }
    (out, norms)
}

pub fn l2norm_backward(grad: &[f64], out: &[f64], norms: &[f64], c: usize) -> Vec<f64> {
    let mut gin = vec![0.0; grad.len()];
    for (loc, n) in norms.iter().enumerate() {
        let g = &grad[loc * c..][..c];
        let y = &out[loc * c..][..c];
        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
        for i in 0..c {
            gin[loc * c + i] = (g[i] - y[i] * dot) / n;
        }
    }
    gin
}

/// `log(1 + exp(-t))` without overflow.
pub fn softplus_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted logistic loss `(1/|P|) Σ ζ_p log(1 + exp(-f_p y_p))`.
pub fn logistic_loss(scores: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((f, y), z)| z * softplus_neg(f * y))
        .sum::<f64>()
        / n
}

pub fn logistic_loss_grad(scores: &[f64], labels: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((f, y), z)| -z * y * sigmoid(-f * y) / n)
        .collect()
}

/// Channel-last affine `x·a[c] + b[c]`.
pub fn channel_affine(input: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let c = a.len();
    let mut out = Vec::with_capacity(input.len());
    for px in input.chunks_exact(c) {
        for ((x, ai), bi) in px.iter().zip(a).zip(b) {
            out.push(x * ai + bi);
        }
    }
    out
}

pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_dim = bias.len();
    let mut out = bias.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &weight[i * out_dim..][..out_dim];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}
