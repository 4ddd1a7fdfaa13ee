use super::*;
use crate::rng::Rng;
use crate::tensor::Tensor;

fn noise_image(size: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(vec![size, size, 3], |_| rng.uniform()).unwrap()
}

/// Bright square on a grey background, shifted by whole response cells.
struct SquareSource {
    config: MatcherConfig,
}

impl SquareSource {
    fn paint(
        size: usize,
        cy: usize,
        cx: usize,
        half: usize,
        color: [f64; 3],
        rng: &mut Rng,
    ) -> Tensor {
        let mut t = Tensor::from_fn(vec![size, size, 3], |_| 0.4 + 0.05 * rng.uniform()).unwrap();
        for y in cy.saturating_sub(half)..(cy + half).min(size) {
            for x in cx.saturating_sub(half)..(cx + half).min(size) {
                for (c, v) in color.iter().enumerate() {
                    t.data_mut()[(y * size + x) * 3 + c] = *v;
                }
            }
        }
        t
    }
}

impl PairSource for SquareSource {
    fn sample_pair(&self, rng: &mut Rng) -> crate::Result<TrainingPair> {
        let cfg = &self.config;
        let n = cfg.response_size()?;
        let stride = cfg.total_stride();
        let color = [rng.uniform(), rng.uniform(), rng.uniform()];
        let ex = cfg.exemplar_size;
        let exemplar = Self::paint(ex, ex / 2, ex / 2, 6, color, rng);
        let (r, c) = (rng.below(n), rng.below(n));
        let half = (n / 2) as i64;
        let s = cfg.search_size as i64;
        let cy = (s / 2 + (r as i64 - half) * stride as i64) as usize;
        let cx = (s / 2 + (c as i64 - half) * stride as i64) as usize;
        let search = Self::paint(cfg.search_size, cy, cx, 6, color, rng);
        Ok(TrainingPair {
            exemplar,
            search,
            target: (r, c),
        })
    }

    fn is_empty(&self) -> bool {
        false
    }
}

#[test]
fn paper_exemplar_features_are_8x8x192() {
    let cfg = MatcherConfig::paper();
    let w = MatcherWeights::init(&cfg, &mut Rng::new(1)).unwrap();
    let f = w
        .extract_features(&Tensor::zeros(vec![127, 127, 3]), None, Mode::Eval)
        .unwrap();
    assert_eq!(f.shape(), &[8, 8, 192]);
    assert_eq!(cfg.feature_size(255).unwrap(), 24);
    assert_eq!(cfg.response_size().unwrap(), 17);
}

#[test]
fn wrong_input_size_is_rejected() {
    let w = MatcherWeights::init(&MatcherConfig::desk(), &mut Rng::new(1)).unwrap();
    assert!(w
        .extract_features(&Tensor::zeros(vec![40, 40, 3]), None, Mode::Eval)
        .is_err());
    assert!(w
        .extract_features(&Tensor::zeros(vec![32, 32, 1]), None, Mode::Eval)
        .is_err());
    let att = vec![0.5; 5];
    assert!(w
        .extract_features(&Tensor::zeros(vec![32, 32, 3]), Some(&att), Mode::Eval)
        .is_err());
}

#[test]
fn uniform_attention_is_removed_by_normalization() {
    let mut rng = Rng::new(2);
    let w = MatcherWeights::init(&MatcherConfig::desk(), &mut rng).unwrap();
    let img = noise_image(64, &mut rng);
    let plain = w.extract_features(&img, None, Mode::Eval).unwrap();
    let half = vec![0.5; w.output_channels()];
    let scaled = w.extract_features(&img, Some(&half), Mode::Eval).unwrap();
    assert!(plain.max_abs_diff(&scaled) < 1e-12);
}

#[test]
fn zero_image_gives_zero_features() {
    let w = MatcherWeights::init(&MatcherConfig::desk(), &mut Rng::new(3)).unwrap();
    let f = w
        .extract_features(&Tensor::zeros(vec![64, 64, 3]), None, Mode::Eval)
        .unwrap();
    assert_eq!(f.max_abs(), 0.0);
}

#[test]
fn exemplar_pasted_at_center_peaks_at_center() {
    let cfg = MatcherConfig::desk();
    let mut rng = Rng::new(4);
    let w = MatcherWeights::init(&cfg, &mut rng).unwrap();
    for _ in 0..5 {
        let x = noise_image(32, &mut rng);
        let mut z = Tensor::filled(vec![64, 64, 3], 0.5);
        for y in 0..32 {
            for xx in 0..32 {
                for c in 0..3 {
                    z.data_mut()[((y + 16) * 64 + xx + 16) * 3 + c] = x.at3(y, xx, c);
                }
            }
        }
        let r = w.match_pair(&x, &z).unwrap();
        assert_eq!(r.argmax(), r.center());
    }
}

#[test]
fn neutral_adaptation_leaves_response_unchanged() {
    let cfg = MatcherConfig::desk();
    let mut rng = Rng::new(5);
    let w = MatcherWeights::init(&cfg, &mut rng).unwrap();
    let neutral = AdaptiveState::neutral(cfg.penultimate_channels(), cfg.base_channels(), 4);
    for _ in 0..5 {
        let x = noise_image(32, &mut rng);
        let z = noise_image(64, &mut rng);
        let a = w.match_with(&x, &z, None).unwrap();
        let b = w.match_with(&x, &z, Some(&neutral)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }
}

#[test]
fn adapt_replaces_rather_than_stacks() {
    let cfg = MatcherConfig::desk();
    let w = MatcherWeights::init(&cfg, &mut Rng::new(6)).unwrap();
    let s = AdaptiveState::neutral(cfg.penultimate_channels(), cfg.base_channels(), 4);
    let once = w.adapt(&s).unwrap();
    let twice = once.adapt(&s).unwrap();
    assert_eq!(once.output_channels(), 16);
    assert_eq!(twice.output_channels(), 16);
}

#[test]
fn adapt_rejects_channel_mismatch() {
    let cfg = MatcherConfig::desk();
    let w = MatcherWeights::init(&cfg, &mut Rng::new(6)).unwrap();
    let s = AdaptiveState::neutral(cfg.penultimate_channels() + 1, cfg.base_channels(), 4);
    assert!(w.adapt(&s).is_err());
    let s = AdaptiveState::neutral(cfg.penultimate_channels(), cfg.base_channels() + 2, 4);
    assert!(w.adapt(&s).is_err());
}

#[test]
fn one_iteration_changes_weights_and_checkpoint_round_trips() {
    let cfg = MatcherConfig::desk();
    let src = SquareSource {
        config: cfg.clone(),
    };
    let hyper = PretrainHyper {
        lr: 1e-3,
        batch: 2,
        iterations: 1,
        seed: 7,
    };
    let init = MatcherWeights::init(&cfg, &mut Rng::derive(7, 0)).unwrap();
    let out = pretrain(&src, &cfg, &hyper, |_, _| {}).unwrap();
    assert!(!out.weights.bit_eq(&init));
    let dir = tempfile::tempdir().unwrap();
    let info = CheckpointInfo {
        seed: 7,
        iterations: 1,
    };
    out.weights.save(dir.path(), &info).unwrap();
    let (back, info_back) = MatcherWeights::load(dir.path()).unwrap();
    assert!(back.bit_eq(&out.weights));
    assert_eq!(info_back, info);
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = MatcherConfig::desk();
    let src = SquareSource {
        config: cfg.clone(),
    };
    let hyper = PretrainHyper {
        lr: 1e-3,
        batch: 2,
        iterations: 3,
        seed: 8,
    };
    let a = pretrain(&src, &cfg, &hyper, |_, _| {}).unwrap();
    let b = pretrain(&src, &cfg, &hyper, |_, _| {}).unwrap();
    assert!(a.weights.bit_eq(&b.weights));
    assert_eq!(a.losses, b.losses);
}

#[test]
fn pretraining_reduces_loss() {
    let cfg = MatcherConfig::desk();
    let src = SquareSource {
        config: cfg.clone(),
    };
    let hyper = PretrainHyper {
        lr: 1e-3,
        batch: 4,
        iterations: 120,
        seed: 9,
    };
    let out = pretrain(&src, &cfg, &hyper, |_, _| {}).unwrap();
    let s = smoothed(&out.losses, 20);
    assert!(s[s.len() - 1] < s[19], "{} !< {}", s[s.len() - 1], s[19]);
}

#[test]
fn checkpoint_of_wrong_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.txt"), "kind = meta\n").unwrap();
    assert!(MatcherWeights::load(dir.path()).is_err());
}

#[test]
fn empty_source_is_an_error() {
    struct Empty;
    impl PairSource for Empty {
        fn sample_pair(&self, _: &mut Rng) -> crate::Result<TrainingPair> {
            unreachable!()
        }
        fn is_empty(&self) -> bool {
            true
        }
    }
    let cfg = MatcherConfig::desk();
    let hyper = PretrainHyper {
        lr: 1e-3,
        batch: 1,
        iterations: 1,
        seed: 0,
    };
    assert!(pretrain(&Empty, &cfg, &hyper, |_, _| {}).is_err());
}

#[test]
fn response_map_argmax_takes_first_maximum() {
    let r = ResponseMap::new(2, 2, vec![1.0, 3.0, 3.0, 0.0]).unwrap();
    assert_eq!(r.argmax(), (0, 1));
    assert!(ResponseMap::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
}
