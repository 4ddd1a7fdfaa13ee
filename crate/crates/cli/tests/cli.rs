use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use mlt_cli::exit;
use mlt_core::geom::BBox;
use mlt_core::world::{export, format_box, RasterFormat, Suite};
use serde_json::Value;

fn mlt(out: &Path, args: &[&str]) -> i32 {
    let mut v = vec![
        "mlt".to_string(),
        "--quiet".into(),
        "--output".into(),
        out.display().to_string(),
    ];
    v.extend(args.iter().map(|s| s.to_string()));
    mlt_cli::main_with_args(v)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(
        &fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())),
    )
    .unwrap()
}

/// Checkpoints from a few iterations of both training stages, shared by
/// the tests that only need something loadable.
fn quick_models() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let small = [
            "--set",
            "train.sequences=4",
            "--set",
            "train.length=20",
            "--set",
            "heldout.sequences=2",
            "--set",
            "heldout.length=20",
            "--set",
            "heldout.episodes=4",
        ];
        let mut a = vec!["train-matcher", "--iterations", "3", "--batch", "2"];
        a.extend(small);
        assert_eq!(mlt(&dir, &a), 0);
        let mut b = vec!["train-meta", "--iterations", "2", "--batch", "2"];
        b.extend(small);
        assert_eq!(mlt(&dir, &b), 0);
        dir
    })
}

fn write_sequence(root: &Path, name: &str, boxes: &[BBox]) -> PathBuf {
    let d = root.join(name);
    fs::create_dir_all(&d).unwrap();
    let gt: String = boxes.iter().map(|b| format_box(b) + "\n").collect();
    fs::write(d.join("groundtruth.txt"), gt).unwrap();
    d
}

fn write_track(root: &Path, name: &str, boxes: &[BBox]) {
    let d = root.join(name);
    fs::create_dir_all(&d).unwrap();
    let mut csv = String::from("frame,x,y,width,height,confidence\n");
    for (i, b) in boxes.iter().enumerate() {
        csv += &format!("{i},{},{},{},{},1\n", b.x, b.y, b.w, b.h);
    }
    fs::write(d.join("track.csv"), csv).unwrap();
}

#[test]
fn binary_reports_config_errors_with_their_exit_code() {
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mlt"))
        .args([
            "--output",
            out.path().to_str().unwrap(),
            "--set",
            "no.such.key=1",
            "bench",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(exit::CONFIG));
    let status = Command::new(env!("CARGO_BIN_EXE_mlt"))
        .arg("frobnicate")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(exit::CONFIG));
}

#[test]
fn output_root_comes_from_the_environment() {
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mlt"))
        .env(mlt_cli::config::OUTPUT_ENV, out.path())
        .args([
            "--quiet", "gen-data", "--suite", "easy", "--count", "1", "--length", "3",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out
        .path()
        .join("data/easy/easy-00/groundtruth.txt")
        .exists());
    assert!(out.path().join("data/easy/config.txt").exists());
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("run.cfg");
    fs::write(
        &cfg,
        "# small suite\nsuite = easy\nsuite.count = 2\nsuite.length = 4\nformat = raw\n",
    )
    .unwrap();
    let code = mlt(
        out.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "gen-data",
            "--count",
            "1",
        ],
    );
    assert_eq!(code, 0);
    let dir = out.path().join("data/easy");
    assert!(dir.join("easy-00/00004.raw").exists());
    assert!(!dir.join("easy-01").exists());
    let echoed = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(echoed.contains("suite.count = 1"));
    assert!(echoed.contains("format = raw"));

    fs::write(&cfg, "suite = easy\nbogus = 3\n").unwrap();
    assert_eq!(
        mlt(out.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]),
        exit::CONFIG
    );
}

#[test]
fn selftest_fault_injection_fails_with_the_check_exit_code() {
    let out = tempfile::tempdir().unwrap();
    let report = out.path().join("st.json");
    let code = mlt(
        out.path(),
        &[
            "selftest",
            "--trials",
            "3",
            "--fault",
            "grad/linear",
            "--json",
            report.to_str().unwrap(),
        ],
    );
    assert_eq!(code, exit::CHECK);
    let r = json(&report);
    let failed: Vec<&str> = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| !c["passed"].as_bool().unwrap())
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["grad/linear"]);
    assert_eq!(
        mlt(out.path(), &["selftest", "--fault", "grad/nothing"]),
        exit::CONFIG
    );
}

#[test]
fn eval_scores_perfect_hand_and_disjoint_tracks() {
    let out = tempfile::tempdir().unwrap();
    let truth = out.path().join("truth");
    let b = BBox::new(10.0, 10.0, 10.0, 10.0);
    // Frame 0 is the given initialization and is not scored.
    let gt = [b, b, b, b];
    write_sequence(&truth, "hand", &gt);
    write_sequence(&truth, "far", &gt);

    let perfect = out.path().join("perfect");
    write_track(&perfect, "hand", &gt);
    let hand = out.path().join("hand");
    // IoUs 1.0, 0.5, 0.0 on the scored frames.
    write_track(
        &hand,
        "hand",
        &[
            b,
            b,
            BBox::new(10.0, 10.0, 10.0, 5.0),
            BBox::new(50.0, 50.0, 10.0, 10.0),
        ],
    );
    let disjoint = out.path().join("disjoint");
    write_track(
        &disjoint,
        "far",
        &[
            b,
            BBox::new(90.0, 0.0, 5.0, 5.0),
            BBox::new(90.0, 0.0, 5.0, 5.0),
            BBox::new(90.0, 0.0, 5.0, 5.0),
        ],
    );

    let code = mlt(
        out.path(),
        &[
            "eval",
            "--truth",
            truth.to_str().unwrap(),
            "--tracker",
            &format!("perfect={}", perfect.display()),
            "--tracker",
            &format!("hand={}", hand.display()),
            "--tracker",
            &format!("disjoint={}", disjoint.display()),
        ],
    );
    assert_eq!(code, 0);
    let dir = out.path().join("eval");
    let p = json(&dir.join("perfect.json"));
    let success: Vec<f64> = p["success"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(success.len(), 101);
    assert!(success[..100].iter().all(|&v| v == 1.0));
    assert!((p["auc"].as_f64().unwrap() - 0.995).abs() < 1e-12);

    let h = json(&dir.join("hand.json"));
    assert!((h["success"][40].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);

    let d = json(&dir.join("disjoint.json"));
    assert_eq!(d["auc"].as_f64().unwrap(), 0.0);
    let svg = fs::read_to_string(dir.join("success.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);

    write_track(&hand, "hand", &gt[..3]);
    let code = mlt(
        out.path(),
        &[
            "eval",
            "--truth",
            truth.to_str().unwrap(),
            "--tracker",
            &format!("hand={}", hand.display()),
        ],
    );
    assert_eq!(code, exit::DATA);
}

#[test]
fn track_without_ground_truth_reports_null_iou() {
    let models = quick_models();
    let out = tempfile::tempdir().unwrap();
    let seq = &Suite::builtin("easy")
        .unwrap()
        .truncated(1, Some(12))
        .generate()
        .unwrap()[0];
    let dir = out.path().join("bare");
    export(seq, &dir, RasterFormat::Ppm).unwrap();
    fs::remove_file(dir.join("groundtruth.txt")).unwrap();
    let ckpt = format!("checkpoints={}", models.join("checkpoints").display());
    let args = [
        "--set",
        ckpt.as_str(),
        "track",
        "--no-meta",
        "--sequence",
        dir.to_str().unwrap(),
    ];
    assert_eq!(mlt(out.path(), &args), exit::CONFIG);

    let init = format_box(&seq.boxes[0]);
    let mut with_init = args.to_vec();
    with_init.extend(["--init", init.as_str()]);
    assert_eq!(mlt(out.path(), &with_init), 0);
    let s = json(&out.path().join("track/mlt-mt/bare/summary.json"));
    assert!(s["mean_iou"].is_null());
    assert!(s["auc"].is_null());
    assert_eq!(s["frames"].as_u64(), Some(12));
    let csv = fs::read_to_string(out.path().join("track/mlt-mt/bare/track.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn track_rejects_missing_sequences_and_mismatched_presets() {
    let models = quick_models();
    let out = tempfile::tempdir().unwrap();
    let ckpt = format!("checkpoints={}", models.join("checkpoints").display());
    let missing = out.path().join("nope");
    assert_eq!(
        mlt(
            out.path(),
            &[
                "--set",
                &ckpt,
                "track",
                "--no-meta",
                "--sequence",
                missing.to_str().unwrap()
            ]
        ),
        exit::DATA
    );
    assert_eq!(
        mlt(
            out.path(),
            &[
                "--set",
                &ckpt,
                "--preset",
                "paper",
                "track",
                "--sequence",
                missing.to_str().unwrap()
            ]
        ),
        exit::CONFIG
    );
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(
        mlt(
            empty.path(),
            &[
                "track",
                "--no-meta",
                "--sequence",
                missing.to_str().unwrap()
            ]
        ),
        exit::DATA
    );
}

#[test]
fn ablation_of_a_single_sequence_is_well_formed() {
    let models = quick_models();
    let out = tempfile::tempdir().unwrap();
    let ckpt = format!("checkpoints={}", models.join("checkpoints").display());
    let code = mlt(
        out.path(),
        &[
            "--set",
            &ckpt,
            "ablation",
            "--suite",
            "distractors",
            "--count",
            "1",
            "--length",
            "15",
        ],
    );
    assert_eq!(code, 0);
    let dir = out.path().join("ablation/distractors");
    let t = json(&dir.join("table.json"));
    let rows = t["rows"].as_array().unwrap();
    let names: Vec<&str> = rows
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["MLT", "MLT-mt", "MLT-mt+ft"]);
    for r in rows {
        assert_eq!(r["per_sequence"].as_array().unwrap().len(), 1);
        let auc = r["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    let text = fs::read_to_string(dir.join("table.txt")).unwrap();
    assert!(text.contains("MLT-mt+ft"));
    assert!(dir.join("success.svg").exists());
    assert!(dir.join("config.txt").exists());
}

#[test]
fn bench_reports_split_latencies_and_a_stable_digest() {
    let models = quick_models();
    let out = tempfile::tempdir().unwrap();
    let ckpt = format!("checkpoints={}", models.join("checkpoints").display());
    let run = || {
        let args = [
            "--set",
            &ckpt,
            "--set",
            "tracker.confidence_threshold=0",
            "bench",
            "--frames",
            "500",
            "--warmup",
            "5",
        ];
        assert_eq!(mlt(out.path(), &args), 0);
        json(&out.path().join("bench/bench.json"))
    };
    let a = run();
    let b = run();
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(a["frames"].as_u64(), Some(500));
    let updates = a["update_frames"].as_u64().unwrap();
    assert!(updates > 0);
    assert!(a["with_updates"]["mean_ms"].as_f64().is_some());
    assert!(a["without_updates"]["p99_ms"].as_f64().is_some());
    assert_eq!(
        mlt(out.path(), &["--set", &ckpt, "bench", "--frames", "100"]),
        exit::CONFIG
    );
}
