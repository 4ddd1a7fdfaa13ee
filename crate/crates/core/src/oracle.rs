//! Brute-force reference implementations used to cross-check the fast
//! kernels. Written for clarity, not speed, and sharing no code with the
//! kernels they check.

use crate::tensor::Tensor;

/// Direct nested-loop valid convolution (cross-correlation form).
/// `input: [H, W, Cin]`, `kernel: [k, k, Cin, Cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Tensor {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let x = |i: usize, j: usize, c: usize| input.data()[i * w * cin + j * cin + c];
    let kv =
        |a: usize, b: usize, c: usize, o: usize| kernel.data()[((a * k + b) * cin + c) * cout + o];
    let mut out = Vec::with_capacity(ho * wo * cout);
    for i in 0..ho {
        for j in 0..wo {
            for o in 0..cout {
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        for c in 0..cin {
                            acc += x(i * stride + a, j * stride + b, c) * kv(a, b, c, o);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out).expect("oracle shape")
}

/// Sliding-window inner products of `exemplar: [h, w, C]` over
/// `search: [H, W, C]`.
pub fn cross_correlate(exemplar: &Tensor, search: &Tensor) -> Tensor {
    let (h, w, c) = (
        exemplar.shape()[0],
        exemplar.shape()[1],
        exemplar.shape()[2],
    );
    let (sh, sw) = (search.shape()[0], search.shape()[1]);
    let (oh, ow) = (sh - h + 1, sw - w + 1);
    let mut out = vec![0.0; oh * ow];
    for (idx, slot) in out.iter_mut().enumerate() {
        let (u, v) = (idx / ow, idx % ow);
        for a in 0..h {
            for b in 0..w {
                for ch in 0..c {
                    *slot += exemplar.data()[(a * w + b) * c + ch]
                        * search.data()[((u + a) * sw + (v + b)) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![oh, ow], out).expect("oracle shape")
}

/// `(1/|P|) Σ_p ζ_p · ln(1 + e^{−y_p f_p})`, evaluated literally.
pub fn logistic_loss(scores: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for p in 0..scores.len() {
        total += weights[p] * (1.0 + (-labels[p] * scores[p]).exp()).ln();
    }
    total / scores.len() as f64
}

/// `−Σ ρ log ρ` with `ρ = e^{s} / Σ e^{s}`, evaluated literally.
pub fn entropy(scores: &[f64]) -> f64 {
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    -scores
        .iter()
        .map(|s| {
            let p = s.exp() / z;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Exhaustive search for the `m`-subset of memory positions that the
/// minimum-entropy rule selects: the unique subset whose every member
/// ranks before every non-member, where rank orders by entropy and then
/// by recency (later position first). Returns the subset in ascending
/// position order.
pub fn select_min_entropy(entropies: &[f64], m: usize) -> Option<Vec<usize>> {
    let n = entropies.len();
    if m > n || n > 20 {
        return None;
    }
    let before =
        |a: usize, b: usize| entropies[a] < entropies[b] || (entropies[a] == entropies[b] && a > b);
    let mut found = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let inside: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let outside: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
        if inside
            .iter()
            .all(|&a| outside.iter().all(|&b| before(a, b)))
        {
            if found.is_some() {
                return None;
            }
            found = Some(inside);
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::Rng;
    use crate::tracker::{response_entropy, select_min_entropy as fast_select};

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_oracle_on_small_shapes() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let h = 1 + rng.below(8);
            let w = 1 + rng.below(8);
            let k = 1 + rng.below(h.min(w));
            let (cin, cout) = (1 + rng.below(4), 1 + rng.below(4));
            let stride = 1 + rng.below(3);
            let x = random(&[h, w, cin], &mut rng);
            let kern = random(&[k, k, cin, cout], &mut rng);
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(x.clone()), tape.constant(kern.clone()));
            let y = tape.conv2d(a, b, stride).unwrap();
            assert!(tape.value(y).max_abs_diff(&conv2d(&x, &kern, stride)) <= 1e-12);
        }
    }

    #[test]
    fn xcorr_matches_oracle_on_small_shapes() {
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let (sh, sw, c) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(4));
            let (h, w) = (1 + rng.below(sh), 1 + rng.below(sw));
            let e = random(&[h, w, c], &mut rng);
            let s = random(&[sh, sw, c], &mut rng);
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(e.clone()), tape.constant(s.clone()));
            let y = tape.cross_correlate(a, b).unwrap();
            assert!(tape.value(y).max_abs_diff(&cross_correlate(&e, &s)) <= 1e-12);
        }
    }

    #[test]
    fn selection_matches_exhaustive_search() {
        let mut rng = Rng::new(3);
        for _ in 0..300 {
            let n = 1 + rng.below(12);
            let m = 1 + rng.below(n.min(4));
            // Coarse values force frequent ties.
            let e: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 * 0.5).collect();
            let mut fast = fast_select(&e, m).unwrap();
            fast.sort_unstable();
            assert_eq!(Some(fast), select_min_entropy(&e, m), "{e:?} m={m}");
        }
    }

    #[test]
    fn entropy_matches_literal_formula() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let s: Vec<f64> = (0..81).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
            assert!((response_entropy(&s) - entropy(&s)).abs() <= 1e-12);
        }
    }
}
