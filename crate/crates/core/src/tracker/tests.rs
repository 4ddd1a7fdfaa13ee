use proptest::prelude::*;

use super::*;
use crate::geom::BBox;
use crate::image::Frame;
use crate::matcher::{MatcherConfig, MatcherWeights};
use crate::meta::{MetaConfig, MetaWeights};
use crate::rng::Rng;
use crate::world::{generate, AnnotatedSequence, WorldSpec};

fn matcher() -> MatcherWeights {
    MatcherWeights::init(&MatcherConfig::desk(), &mut Rng::new(5)).unwrap()
}

fn theta() -> MetaWeights {
    let mut t = MetaWeights::init(&MetaConfig::desk(), &mut Rng::new(6)).unwrap();
    t.wk = t.wk.scaled(300.0);
    t.gain = 1.0;
    t
}

fn sequence(length: usize) -> AnnotatedSequence {
    generate(&WorldSpec {
        width: 96,
        height: 96,
        length,
        max_speed: 1.5,
        noise: 0.02,
        seed: 17,
        ..WorldSpec::default()
    })
    .unwrap()
}

/// Every frame enters memory.
fn eager() -> TrackerParams {
    TrackerParams {
        confidence_threshold: 0.0,
        ..TrackerParams::desk()
    }
}

#[test]
fn init_without_steps_keeps_the_initial_state() {
    let m = matcher();
    let s = sequence(2);
    let sess = TrackerSession::init(
        &s.frames[0],
        &s.boxes[0],
        &m,
        None,
        &eager(),
        Variant::MatchOnly,
    )
    .unwrap();
    assert_eq!(sess.state(), TargetState::from_bbox(&s.boxes[0]));
    assert_eq!(sess.state().bbox(), s.boxes[0]);
    assert!(sess.memory().is_empty());
    assert!(sess.adaptation().is_none());
}

#[test]
fn exemplar_filling_the_context_is_a_plain_copy() {
    let px: Vec<u8> = (0..32 * 32 * 3).map(|i| (i * 13 % 256) as u8).collect();
    let f = Frame::new(32, 32, px).unwrap();
    let m = matcher();
    let b = BBox::new(8.0, 8.0, 16.0, 16.0);
    let sess = TrackerSession::init(&f, &b, &m, None, &eager(), Variant::MatchOnly).unwrap();
    assert!(sess.exemplar().bit_eq(&f.to_tensor()));
}

#[test]
fn init_is_deterministic_and_validates_its_box() {
    let m = matcher();
    let s = sequence(2);
    let a = TrackerSession::init(
        &s.frames[0],
        &s.boxes[0],
        &m,
        None,
        &eager(),
        Variant::MatchOnly,
    )
    .unwrap();
    let b = TrackerSession::init(
        &s.frames[0],
        &s.boxes[0],
        &m,
        None,
        &eager(),
        Variant::MatchOnly,
    )
    .unwrap();
    assert!(a.exemplar().bit_eq(b.exemplar()));
    assert_eq!(a.state(), b.state());
    for bad in [
        BBox::new(10.0, 10.0, 0.0, 5.0),
        BBox::new(500.0, 500.0, 5.0, 5.0),
        BBox::new(f64::NAN, 1.0, 5.0, 5.0),
    ] {
        assert!(
            TrackerSession::init(&s.frames[0], &bad, &m, None, &eager(), Variant::MatchOnly)
                .is_err()
        );
    }
    assert!(
        TrackerSession::init(&s.frames[0], &s.boxes[0], &m, None, &eager(), Variant::Meta).is_err()
    );
}

#[test]
fn uniform_response_picks_the_center() {
    let w = CosineWindow::new(9, 9, 0.25);
    let c = locate(&[vec![0.6; 81]], &w, &[1.0], 0.97);
    assert_eq!((c.row, c.col), (4, 4));
    assert_eq!(c.peak, 0.6);
}

#[test]
fn penalty_breaks_equal_peaks_toward_unit_scale() {
    let w = CosineWindow::new(9, 9, 0.25);
    let map = vec![0.8; 81];
    for scales in [[1.035, 1.0], [1.0, 1.035]] {
        let c = locate(&[map.clone(), map.clone()], &w, &scales, 0.97);
        assert_eq!(scales[c.scale_index], 1.0);
    }
}

#[test]
fn update_needs_m_samples() {
    let m = matcher();
    let t = theta();
    let s = sequence(8);
    let params = TrackerParams {
        update_period: 1000,
        ..eager()
    };
    let mut sess = TrackerSession::init(
        &s.frames[0],
        &s.boxes[0],
        &m,
        Some(&t),
        &params,
        Variant::Meta,
    )
    .unwrap();
    for f in &s.frames[1..params.samples] {
        sess.step(f).unwrap();
    }
    assert_eq!(sess.memory().len(), params.samples - 1);
    assert!(!sess.update().unwrap());
    assert!(sess.adaptation().is_none());
    assert!(sess.active_matcher().bit_eq(&m));
    sess.step(&s.frames[params.samples]).unwrap();
    assert!(sess.update().unwrap());
    assert!(sess.adaptation().is_some());
}

#[test]
fn update_changes_responses_and_is_reproducible() {
    let m = matcher();
    let t = theta();
    let s = sequence(10);
    let params = TrackerParams {
        update_period: 1000,
        ..eager()
    };
    let mut sess = TrackerSession::init(
        &s.frames[0],
        &s.boxes[0],
        &m,
        Some(&t),
        &params,
        Variant::Meta,
    )
    .unwrap();
    for f in &s.frames[1..] {
        sess.step(f).unwrap();
    }
    let crop = sess.memory().get(0).unwrap().crop.clone();
    let before = sess.respond(&crop).unwrap();
    let mut twin = sess.clone();
    assert!(sess.update().unwrap());
    assert!(twin.update().unwrap());
    assert!(sess
        .adaptation()
        .unwrap()
        .bit_eq(twin.adaptation().unwrap()));
    let after = sess.respond(&crop).unwrap();
    assert!(before.max_abs_diff(&after) > 1e-6);
}

#[test]
fn disabled_meta_update_reproduces_the_matching_baseline() {
    let m = matcher();
    let t = theta();
    let s = sequence(25);
    let params = TrackerParams {
        update_period: 1000,
        ..eager()
    };
    let a = track_sequence(&s.frames, &s.boxes[0], &m, Some(&t), &params, Variant::Meta).unwrap();
    let b = track_sequence(
        &s.frames,
        &s.boxes[0],
        &m,
        None,
        &params,
        Variant::MatchOnly,
    )
    .unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.results, b.results);
}

#[test]
fn tracking_is_deterministic_and_respects_invariants() {
    let m = matcher();
    let t = theta();
    let s = sequence(40);
    let params = TrackerParams {
        update_period: 10,
        memory_capacity: 6,
        ..TrackerParams::desk()
    };
    let run = || {
        let mut sess = TrackerSession::init(
            &s.frames[0],
            &s.boxes[0],
            &m,
            Some(&t),
            &params,
            Variant::Meta,
        )
        .unwrap();
        let mut out = Vec::new();
        for f in &s.frames[1..] {
            let before = sess.state();
            let r = sess.step(f).unwrap();
            let max_dev = params
                .scales
                .iter()
                .map(|x| (x - 1.0).abs())
                .fold(0.0, f64::max);
            assert!(
                (r.state.w - before.w).abs() <= params.scale_damping * before.w * max_dev + 1e-12
            );
            assert!(
                (r.state.h - before.h).abs() <= params.scale_damping * before.h * max_dev + 1e-12
            );
            assert!(r.state.bbox().intersects_frame(f.width(), f.height()));
            assert!(sess.memory().len() <= params.memory_capacity);
            assert!(sess
                .memory()
                .entries()
                .all(|e| e.confidence > params.confidence_threshold));
            out.push(r);
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn finetune_changes_only_the_last_kernel() {
    let m = matcher();
    let s = sequence(12);
    let params = TrackerParams {
        finetune_period: 10,
        finetune_iterations: 3,
        ..eager()
    };
    let track =
        track_sequence(&s.frames, &s.boxes[0], &m, None, &params, Variant::Finetune).unwrap();
    assert!(track.results[10].updated);
    assert_eq!(track.results.iter().filter(|r| r.updated).count(), 1);

    let mut sess = TrackerSession::init(
        &s.frames[0],
        &s.boxes[0],
        &m,
        None,
        &params,
        Variant::Finetune,
    )
    .unwrap();
    for f in &s.frames[1..10] {
        sess.step(f).unwrap();
    }
    assert!(sess.finetune().unwrap());
    let a = sess.active_matcher();
    let n = m.layers().len();
    for i in 0..n - 1 {
        assert!(a.layers()[i].kernel.bit_eq(&m.layers()[i].kernel));
    }
    assert!(!a.last_kernel().bit_eq(m.last_kernel()));
}

#[test]
fn csv_has_one_line_per_frame() {
    let m = matcher();
    let s = sequence(5);
    let t = track_sequence(
        &s.frames,
        &s.boxes[0],
        &m,
        None,
        &eager(),
        Variant::MatchOnly,
    )
    .unwrap();
    let csv = t.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
}

proptest! {
    #[test]
    fn positive_rescaling_keeps_the_choice(
        seed in 0u64..1000,
        k in 0.01f64..100.0,
    ) {
        let mut r = Rng::new(seed);
        let maps: Vec<Vec<f64>> = (0..3).map(|_| (0..81).map(|_| r.uniform()).collect()).collect();
        let scaled: Vec<Vec<f64>> = maps.iter().map(|m| m.iter().map(|v| v * k).collect()).collect();
        let w = CosineWindow::new(9, 9, 0.25);
        let scales = [1.0, 1.0 / 1.035, 1.035];
        let a = locate(&maps, &w, &scales, 0.97);
        let b = locate(&scaled, &w, &scales, 0.97);
        prop_assert_eq!((a.scale_index, a.row, a.col), (b.scale_index, b.row, b.col));
    }
}
