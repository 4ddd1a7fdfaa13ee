use super::*;
use crate::autodiff::Tape;
use crate::matcher::{LabelMap, MatcherConfig, MatcherWeights, Mode, Trainable};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn image(size: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(vec![size, size, 3], |_| rng.uniform()).unwrap()
}

fn matcher(seed: u64) -> MatcherWeights {
    MatcherWeights::init(&MatcherConfig::desk(), &mut Rng::new(seed)).unwrap()
}

/// Noise exemplar pasted into noise search patches at random whole-cell
/// offsets.
struct PasteSource;

impl EpisodeSource for PasteSource {
    fn sample_episode(&self, m_prime: usize, rng: &mut Rng) -> crate::Result<Episode> {
        let x = image(32, rng);
        let mut patches = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..m_prime {
            let (r, c) = (rng.below(9), rng.below(9));
            let mut z = Tensor::from_fn(vec![64, 64, 3], |_| 0.3 * rng.uniform()).unwrap();
            for y in 0..32 {
                for xx in 0..32 {
                    for ch in 0..3 {
                        z.data_mut()[((y + 4 * r) * 64 + xx + 4 * c) * 3 + ch] = x.at3(y, xx, ch);
                    }
                }
            }
            patches.push(z);
            targets.push((r, c));
        }
        Ok(Episode {
            exemplar: x,
            patches,
            targets,
        })
    }

    fn is_empty(&self) -> bool {
        false
    }
}

/// Per-sample −∂loss/∂w_N through the whole network on one tape.
fn full_network_negative_grad(m: &MatcherWeights, x: &Tensor, z: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, Trainable::LastKernel);
    let xi = tape.constant(x.clone());
    let zi = tape.constant(z.clone());
    let (f, _) = m
        .features_on_tape(&mut tape, &bound, None, &[xi, zi], Mode::Eval)
        .unwrap();
    let r = m.response_on_tape(&mut tape, f[0], f[1]).unwrap();
    let label = LabelMap::centered(m.config()).unwrap();
    let l = tape
        .logistic_loss(r, label.labels(), label.weights())
        .unwrap();
    let k = bound.layers.last().unwrap().kernel;
    tape.backward(l).unwrap().take(k).unwrap().scaled(-1.0)
}

#[test]
fn zero_theta_gives_zero_kernels_and_half_attention() {
    let cfg = MetaConfig::desk();
    let theta = MetaWeights::zeros(&cfg).unwrap();
    let mut rng = Rng::new(1);
    let delta = Tensor::from_fn(cfg.delta_shape().to_vec(), |_| rng.normal()).unwrap();
    let s = theta.generate(&delta, Mode::Eval, None).unwrap();
    assert_eq!(s.target_kernels().shape(), &cfg.kernel_shape());
    assert_eq!(s.target_kernels().max_abs(), 0.0);
    assert!(s.attention().data().iter().all(|a| *a == 0.5));
}

#[test]
fn eval_generation_is_bitwise_deterministic() {
    let cfg = MetaConfig::desk();
    let theta = MetaWeights::init(&cfg, &mut Rng::new(2)).unwrap();
    let mut rng = Rng::new(3);
    let delta = Tensor::from_fn(cfg.delta_shape().to_vec(), |_| rng.normal()).unwrap();
    let a = theta.generate(&delta, Mode::Eval, None).unwrap();
    let b = theta.generate(&delta, Mode::Eval, None).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn train_generation_needs_rng_and_wrong_delta_is_rejected() {
    let cfg = MetaConfig::desk();
    let theta = MetaWeights::init(&cfg, &mut Rng::new(2)).unwrap();
    let delta = Tensor::zeros(cfg.delta_shape().to_vec());
    assert!(theta.generate(&delta, Mode::Train, None).is_err());
    assert!(theta
        .generate(&Tensor::zeros(vec![1, 1, 16, 11]), Mode::Eval, None)
        .is_err());
}

#[test]
fn single_patch_delta_matches_full_network_gradient() {
    let m = matcher(4);
    let mut rng = Rng::new(5);
    let x = image(32, &mut rng);
    let z = image(64, &mut rng);
    let d = compute_delta(&m, &x, std::slice::from_ref(&z)).unwrap();
    let reference = full_network_negative_grad(&m, &x, &z);
    assert!(d.max_abs_diff(&reference) < 1e-12);
    assert!(d.max_abs() > 0.0);
}

#[test]
fn delta_is_mean_of_per_sample_gradients() {
    let m = matcher(6);
    let mut rng = Rng::new(7);
    let x = image(32, &mut rng);
    let zs: Vec<Tensor> = (0..4).map(|_| image(64, &mut rng)).collect();
    let d = compute_delta(&m, &x, &zs).unwrap();
    let mut acc = Tensor::zeros(d.shape().to_vec());
    for z in &zs {
        acc.add_assign(&full_network_negative_grad(&m, &x, z))
            .unwrap();
    }
    assert!(d.max_abs_diff(&acc.scaled(0.25)) < 1e-12);
}

#[test]
fn delta_of_union_is_size_weighted_average() {
    let m = matcher(8);
    let mut rng = Rng::new(9);
    let x = image(32, &mut rng);
    let zs: Vec<Tensor> = (0..5).map(|_| image(64, &mut rng)).collect();
    let a = compute_delta(&m, &x, &zs[..2]).unwrap();
    let b = compute_delta(&m, &x, &zs[2..]).unwrap();
    let all = compute_delta(&m, &x, &zs).unwrap();
    let mut mix = a.scaled(2.0 / 5.0);
    mix.add_assign(&b.scaled(3.0 / 5.0)).unwrap();
    assert!(all.max_abs_diff(&mix) < 1e-12);
}

#[test]
fn empty_patch_set_is_rejected() {
    let m = matcher(1);
    assert!(compute_delta(&m, &Tensor::zeros(vec![32, 32, 3]), &[]).is_err());
}

#[test]
fn checkpoint_round_trips() {
    let cfg = MetaConfig::desk();
    let mut theta = MetaWeights::init(&cfg, &mut Rng::new(10)).unwrap();
    theta.gain = 1.0 / 3.0;
    let dir = tempfile::tempdir().unwrap();
    let info = crate::matcher::CheckpointInfo {
        seed: 10,
        iterations: 0,
    };
    theta.save(dir.path(), &info).unwrap();
    let (back, i) = MetaWeights::load(dir.path()).unwrap();
    assert!(back.bit_eq(&theta));
    assert_eq!(i, info);
    assert!(MatcherWeights::load(dir.path()).is_err());
}

fn hyper(iterations: usize) -> MetaHyper {
    MetaHyper {
        lr: 1e-3,
        batch: 2,
        iterations,
        seed: 11,
        calibration: 2,
    }
}

#[test]
fn meta_training_leaves_matcher_untouched_and_is_deterministic() {
    let m = matcher(12);
    let before = m.clone();
    let cfg = MetaConfig::desk();
    let a = meta_train(&m, &PasteSource, &cfg, &hyper(3), |_, _| {}).unwrap();
    let b = meta_train(&m, &PasteSource, &cfg, &hyper(3), |_, _| {}).unwrap();
    assert!(m.bit_eq(&before));
    assert!(a.weights.bit_eq(&b.weights));
    assert!(a.weights.gain > 0.0 && a.weights.gain != 1.0);
}

#[test]
fn meta_training_rejects_bad_setups() {
    let m = matcher(13);
    let mut cfg = MetaConfig::desk();
    cfg.m_prime = 2;
    assert!(meta_train(&m, &PasteSource, &cfg, &hyper(1), |_, _| {}).is_err());
    let cfg = MetaConfig::desk();
    let adapted = m
        .adapt(&crate::matcher::AdaptiveState::neutral(16, 12, 4))
        .unwrap();
    assert!(meta_train(&adapted, &PasteSource, &cfg, &hyper(1), |_, _| {}).is_err());
}

#[test]
fn neutral_theta_scores_like_unadapted() {
    // Zero kernel head and a saturated attention head reproduce the plain
    // matcher.
    let m = matcher(14);
    let cfg = MetaConfig::desk();
    let mut theta = MetaWeights::zeros(&cfg).unwrap();
    theta.ba.data_mut().iter_mut().for_each(|v| *v = 800.0);
    let ep = PasteSource.sample_episode(8, &mut Rng::new(15)).unwrap();
    let s = evaluate_episode(&m, &theta, &ep).unwrap();
    assert!((s.adapted - s.unadapted).abs() < 1e-12);
}
