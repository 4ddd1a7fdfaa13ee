//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use mlt_core::eval::{success_plot_svg, EvalReport, FpsStats, SequenceReport};
use mlt_core::geom::BBox;
use mlt_core::manifest::Manifest;
use mlt_core::matcher::{pretrain, smoothed, CheckpointInfo, MatcherWeights, PretrainHyper};
use mlt_core::meta::{evaluate_episode, meta_train, EpisodeSource, MetaHyper, MetaWeights};
use mlt_core::selftest::{self, SelfTestConfig};
use mlt_core::tracker::{track_sequence, Track, TrackerParams, Variant};
use mlt_core::world::{
    export, generate_named, ingest, ingest_frames, parse_box_line, read_boxes, training_pool,
    AnnotatedSequence, Attributes, SequencePool, Suite, WorldSpec,
};
use mlt_core::Rng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{Cli, Command};

/// Offset between the training-pool seed and the held-out pool seed.
pub const HELDOUT_SEED_OFFSET: u64 = 1000;
/// Stream tag of held-out episode sampling.
const HELDOUT_STREAM: u64 = 0x4e1d;

pub fn dispatch(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    let ui = Ui {
        quiet: cli.global.quiet,
    };
    match &cli.command {
        Command::Selftest {
            trials,
            fault,
            json,
        } => cmd_selftest(cfg, *trials, fault.clone(), json.as_deref()),
        Command::GenData { suite, out, .. } => {
            cmd_gen_data(cfg, &ui, suite.as_deref(), out.as_deref())
        }
        Command::TrainMatcher { .. } => cmd_train_matcher(cfg, &ui),
        Command::TrainMeta { .. } => cmd_train_meta(cfg, &ui),
        Command::Track {
            sequences,
            init,
            no_meta,
            finetune,
            out,
        } => {
            let variant = match (no_meta, finetune) {
                (_, true) => Variant::Finetune,
                (true, _) => Variant::MatchOnly,
                _ => Variant::Meta,
            };
            cmd_track(
                cfg,
                &ui,
                sequences,
                init.as_deref(),
                variant,
                out.as_deref(),
            )
        }
        Command::Eval {
            truth,
            trackers,
            out,
        } => cmd_eval(cfg, &ui, truth, trackers, out.as_deref()),
        Command::Ablation { .. } => cmd_ablation(cfg, &ui),
        Command::Bench { no_meta, .. } => cmd_bench(cfg, &ui, *no_meta),
    }
}

/// Progress reporting on stderr.
pub struct Ui {
    pub quiet: bool,
}

impl Ui {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write(path, text + "\n")
}

fn thread_pool(cfg: &RunConfig) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// 64-bit FNV-1a digest, for comparing outputs across runs.
pub fn digest(bytes: &[u8]) -> String {
    let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    format!("{h:016x}")
}

fn cmd_selftest(
    cfg: &RunConfig,
    trials: usize,
    fault: Option<String>,
    json: Option<&Path>,
) -> CliResult<()> {
    if let Some(f) = &fault {
        if !selftest::gradient_check_names().contains(&f.as_str()) {
            return Err(CliError::Config(format!(
                "unknown check {f:?}; one of: {}",
                selftest::gradient_check_names().join(", ")
            )));
        }
    }
    let clock = Instant::now();
    let report = selftest::run(&SelfTestConfig {
        trials,
        seed: cfg.seed,
        fault,
    })?;
    print!("{}", report.to_text());
    println!("elapsed {:.1}s", clock.elapsed().as_secs_f64());
    if let Some(p) = json {
        write_json(p, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Check(failed.join(", ")))
    }
}

// ---------------------------------------------------------------- data

/// The sequences a suite name stands for under `cfg`.
pub fn suite_sequences(cfg: &RunConfig, name: &str) -> CliResult<Vec<AnnotatedSequence>> {
    let count = |default: usize| {
        if cfg.suite_count > 0 {
            cfg.suite_count
        } else {
            default
        }
    };
    let length = |default: usize| {
        if cfg.suite_length > 0 {
            cfg.suite_length
        } else {
            default
        }
    };
    Ok(match name {
        "train" => training_pool(
            count(cfg.train_sequences),
            length(cfg.train_length),
            cfg.seed,
        )?,
        "heldout" => training_pool(
            count(cfg.heldout_sequences),
            length(cfg.heldout_length),
            cfg.seed + HELDOUT_SEED_OFFSET,
        )?,
        _ => {
            let suite = Suite::builtin(name).map_err(|e| CliError::Config(e.to_string()))?;
            let n = suite.len();
            suite
                .truncated(count(n), (cfg.suite_length > 0).then_some(cfg.suite_length))
                .generate()?
        }
    })
}

fn same_sequence(a: &AnnotatedSequence, b: &AnnotatedSequence) -> bool {
    let bits = |x: &BBox| [x.x.to_bits(), x.y.to_bits(), x.w.to_bits(), x.h.to_bits()];
    a.frames == b.frames
        && a.boxes.len() == b.boxes.len()
        && a.boxes
            .iter()
            .zip(&b.boxes)
            .all(|(p, q)| bits(p) == bits(q))
        && a.spec == b.spec
}

fn cmd_gen_data(
    cfg: &RunConfig,
    ui: &Ui,
    suite: Option<&str>,
    out: Option<&Path>,
) -> CliResult<()> {
    let name = suite.unwrap_or(&cfg.suite);
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.data.join(name));
    let seqs = suite_sequences(cfg, name)?;
    cfg.echo(&dir)?;
    let mut frames = 0;
    for s in &seqs {
        let d = dir.join(&s.name);
        export(s, &d, cfg.format)?;
        if !same_sequence(s, &ingest(&d)?) {
            return Err(CliError::Check(format!(
                "{} does not round-trip",
                d.display()
            )));
        }
        frames += s.len();
        ui.note(format!("wrote {} ({} frames)", d.display(), s.len()));
    }
    println!(
        "{} sequences, {frames} frames written to {} and verified bit-exact on reload",
        seqs.len(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- training

fn matcher_dir(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoints.join("matcher")
}

fn meta_dir(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoints.join("meta")
}

fn losses_csv(losses: &[f64]) -> String {
    let sm = smoothed(losses, 100);
    let mut s = String::from("iteration,loss,smoothed\n");
    for (i, (l, m)) in losses.iter().zip(&sm).enumerate() {
        let _ = writeln!(s, "{i},{l},{m}");
    }
    s
}

fn progress<'a>(ui: &'a Ui, stage: &'a str, total: usize) -> impl FnMut(usize, f64) + 'a {
    let mut recent = Vec::new();
    move |i, l| {
        recent.push(l);
        if (i + 1) % 100 == 0 || i + 1 == total {
            let m = recent.iter().sum::<f64>() / recent.len() as f64;
            ui.note(format!("{stage} {}/{total} loss {m:.4}", i + 1));
            recent.clear();
        }
    }
}

fn cmd_train_matcher(cfg: &RunConfig, ui: &Ui) -> CliResult<()> {
    let dir = matcher_dir(cfg);
    let pool = SequencePool::new(
        training_pool(cfg.train_sequences, cfg.train_length, cfg.seed)?,
        &cfg.matcher,
    );
    let clock = Instant::now();
    let out = pretrain(
        &pool,
        &cfg.matcher,
        &PretrainHyper {
            lr: cfg.pretrain_lr,
            batch: cfg.pretrain_batch,
            iterations: cfg.pretrain_iterations,
            seed: cfg.seed,
        },
        progress(ui, "matcher", cfg.pretrain_iterations),
    )?;
    let seconds = clock.elapsed().as_secs_f64();
    out.weights.save(
        &dir,
        &CheckpointInfo {
            seed: cfg.seed,
            iterations: cfg.pretrain_iterations as u64,
        },
    )?;
    cfg.echo(&dir)?;
    write(&dir.join("losses.csv"), losses_csv(&out.losses))?;
    let sm = smoothed(&out.losses, 100);
    let summary = json!({
        "iterations": cfg.pretrain_iterations,
        "seconds": seconds,
        "first_loss": out.losses.first(),
        "final_smoothed_loss": sm.last(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "matcher: {} iterations in {seconds:.0}s, smoothed loss {:.4} -> {:.4}, saved to {}",
        cfg.pretrain_iterations,
        sm.first().copied().unwrap_or(f64::NAN),
        sm.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

/// Loads the matcher checkpoint and checks it against the config preset.
pub fn load_matcher(cfg: &RunConfig) -> CliResult<MatcherWeights> {
    let dir = matcher_dir(cfg);
    let (w, _) = MatcherWeights::load(&dir)?;
    if w.config().preset != cfg.preset {
        return Err(CliError::Config(format!(
            "matcher checkpoint {} is {} but the config preset is {}",
            dir.display(),
            w.config().preset,
            cfg.preset
        )));
    }
    Ok(w)
}

pub fn load_meta(cfg: &RunConfig, matcher: &MatcherWeights) -> CliResult<MetaWeights> {
    let dir = meta_dir(cfg);
    let (t, _) = MetaWeights::load(&dir)?;
    let c = t.config();
    if c.preset != cfg.preset {
        return Err(CliError::Config(format!(
            "meta checkpoint {} is {} but the config preset is {}",
            dir.display(),
            c.preset,
            cfg.preset
        )));
    }
    c.check_matcher(matcher.config())
        .map_err(|e| CliError::Config(format!("meta checkpoint does not fit the matcher: {e}")))?;
    if c.m != cfg.meta.m {
        return Err(CliError::Config(format!(
            "meta checkpoint was trained with meta.m = {} but the config has {}",
            c.m, cfg.meta.m
        )));
    }
    Ok(t)
}

/// Outcome of scoring held-out episodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heldout {
    pub episodes: usize,
    pub improved: usize,
    pub fraction: f64,
    pub mean_adapted: f64,
    pub mean_unadapted: f64,
}

pub fn score_heldout(
    cfg: &RunConfig,
    matcher: &MatcherWeights,
    theta: &MetaWeights,
) -> CliResult<Heldout> {
    let pool = SequencePool::new(suite_sequences_heldout(cfg)?, matcher.config());
    let mut rng = Rng::derive(cfg.seed, HELDOUT_STREAM);
    let (mut improved, mut sa, mut su) = (0, 0.0, 0.0);
    for _ in 0..cfg.heldout_episodes {
        let ep = pool.sample_episode(theta.config().m_prime, &mut rng)?;
        let s = evaluate_episode(matcher, theta, &ep)?;
        improved += s.improved() as usize;
        sa += s.adapted;
        su += s.unadapted;
    }
    let n = cfg.heldout_episodes.max(1) as f64;
    Ok(Heldout {
        episodes: cfg.heldout_episodes,
        improved,
        fraction: improved as f64 / n,
        mean_adapted: sa / n,
        mean_unadapted: su / n,
    })
}

fn suite_sequences_heldout(cfg: &RunConfig) -> CliResult<Vec<AnnotatedSequence>> {
    Ok(training_pool(
        cfg.heldout_sequences,
        cfg.heldout_length,
        cfg.seed + HELDOUT_SEED_OFFSET,
    )?)
}

fn cmd_train_meta(cfg: &RunConfig, ui: &Ui) -> CliResult<()> {
    let matcher = load_matcher(cfg)?;
    let dir = meta_dir(cfg);
    let pool = SequencePool::new(
        training_pool(cfg.train_sequences, cfg.train_length, cfg.seed)?,
        matcher.config(),
    );
    let clock = Instant::now();
    let out = meta_train(
        &matcher,
        &pool,
        &cfg.meta,
        &MetaHyper {
            lr: cfg.meta_lr,
            batch: cfg.meta_batch,
            iterations: cfg.meta_iterations,
            seed: cfg.seed,
            calibration: cfg.meta_calibration,
        },
        progress(ui, "meta", cfg.meta_iterations),
    )?;
    let seconds = clock.elapsed().as_secs_f64();
    out.weights.save(
        &dir,
        &CheckpointInfo {
            seed: cfg.seed,
            iterations: cfg.meta_iterations as u64,
        },
    )?;
    cfg.echo(&dir)?;
    write(&dir.join("losses.csv"), losses_csv(&out.losses))?;
    ui.note("scoring held-out episodes");
    let held = score_heldout(cfg, &matcher, &out.weights)?;
    write_json(&dir.join("heldout.json"), &held)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "iterations": cfg.meta_iterations,
            "seconds": seconds,
            "gain": out.weights.gain,
            "final_smoothed_loss": smoothed(&out.losses, 100).last(),
            "heldout": held,
        }),
    )?;
    println!(
        "meta-learner: {} iterations in {seconds:.0}s, saved to {}",
        cfg.meta_iterations,
        dir.display()
    );
    println!(
        "held-out: adapted loss lower on {}/{} episodes ({:.1}%), mean {:.4} vs {:.4} unadapted",
        held.improved,
        held.episodes,
        100.0 * held.fraction,
        held.mean_adapted,
        held.mean_unadapted
    );
    Ok(())
}

// ---------------------------------------------------------------- tracking

/// IoU scoring of one tracked sequence. The initialization frame is
/// excluded since it is given, not predicted.
pub fn score_sequence(
    name: &str,
    pred: &[BBox],
    truth: &[BBox],
    attrs: Attributes,
) -> CliResult<SequenceReport> {
    if pred.len() != truth.len() {
        return Err(CliError::Data(format!(
            "{name}: {} predicted boxes but {} ground-truth boxes",
            pred.len(),
            truth.len()
        )));
    }
    let skip = usize::from(pred.len() > 1);
    Ok(SequenceReport::new(
        name,
        &pred[skip..],
        &truth[skip..],
        attrs,
    )?)
}

fn timing_csv(track: &Track) -> String {
    let mut s = String::from("frame,seconds,updated\n");
    for (r, t) in track.results.iter().zip(&track.seconds) {
        let _ = writeln!(s, "{},{t},{}", r.frame, u8::from(r.updated));
    }
    s
}

fn parse_init(s: &str) -> CliResult<BBox> {
    parse_box_line(s).ok_or_else(|| CliError::Config(format!("--init expects x,y,w,h, got {s:?}")))
}

fn sequence_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into())
}

/// Attributes recorded in a sequence directory's `spec.txt`, if any.
fn directory_attributes(dir: &Path) -> CliResult<Attributes> {
    let p = dir.join("spec.txt");
    if !p.exists() {
        return Ok(Attributes::default());
    }
    Ok(Attributes::from_spec(&WorldSpec::from_manifest(
        &Manifest::load(&p)?,
        &p,
    )?))
}

/// Summary written next to each track CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackSummary {
    pub sequence: String,
    pub tracker: String,
    pub frames: usize,
    pub updates: usize,
    pub mean_fps: f64,
    pub fps: Option<FpsStats>,
    pub mean_iou: Option<f64>,
    pub auc: Option<f64>,
}

fn track_dir(
    dir: &Path,
    init: Option<&str>,
    models: (&MatcherWeights, Option<&MetaWeights>),
    params: &TrackerParams,
    variant: Variant,
    out: &Path,
) -> CliResult<TrackSummary> {
    let name = sequence_name(dir);
    let frames = ingest_frames(dir)?;
    if frames.is_empty() {
        return Err(CliError::Data(format!("{}: no frames", dir.display())));
    }
    let gt_path = dir.join("groundtruth.txt");
    let truth = if gt_path.exists() {
        Some(read_boxes(&gt_path)?)
    } else {
        None
    };
    if let Some(t) = &truth {
        if t.len() != frames.len() {
            return Err(CliError::Data(format!(
                "{}: {} frames but {} ground-truth boxes",
                dir.display(),
                frames.len(),
                t.len()
            )));
        }
    }
    let init = match (init, &truth) {
        (Some(s), _) => parse_init(s)?,
        (None, Some(t)) => t[0],
        (None, None) => {
            return Err(CliError::Config(format!(
                "{}: no groundtruth.txt, pass --init x,y,w,h",
                dir.display()
            )))
        }
    };
    let track = track_sequence(&frames, &init, models.0, models.1, params, variant)?;
    let seq_out = out.join(&name);
    write(&seq_out.join("track.csv"), track.to_csv())?;
    write(&seq_out.join("timing.csv"), timing_csv(&track))?;
    let scored = match &truth {
        Some(t) => Some(score_sequence(
            &name,
            &track.boxes(),
            t,
            directory_attributes(dir)?,
        )?),
        None => None,
    };
    let summary = TrackSummary {
        sequence: name,
        tracker: variant.label().to_string(),
        frames: frames.len(),
        updates: track.results.iter().filter(|r| r.updated).count(),
        mean_fps: track.mean_fps(),
        fps: FpsStats::from_seconds(&track.seconds[1..]),
        mean_iou: scored.as_ref().map(|s| s.mean_iou),
        auc: scored.as_ref().map(|s| s.auc),
    };
    write_json(&seq_out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn variant_dir(v: Variant) -> &'static str {
    match v {
        Variant::Meta => "mlt",
        Variant::MatchOnly => "mlt-mt",
        Variant::Finetune => "mlt-mt-ft",
    }
}

fn cmd_track(
    cfg: &RunConfig,
    ui: &Ui,
    sequences: &[PathBuf],
    init: Option<&str>,
    variant: Variant,
    out: Option<&Path>,
) -> CliResult<()> {
    if init.is_some() && sequences.len() > 1 {
        return Err(CliError::Config(
            "--init applies to a single --sequence".into(),
        ));
    }
    let matcher = load_matcher(cfg)?;
    let theta = match variant {
        Variant::Meta => Some(load_meta(cfg, &matcher)?),
        _ => None,
    };
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.join("track").join(variant_dir(variant)));
    cfg.echo(&out)?;
    let pool = thread_pool(cfg)?;
    let mut summaries = pool.install(|| {
        sequences
            .par_iter()
            .map(|d| {
                track_dir(
                    d,
                    init,
                    (&matcher, theta.as_ref()),
                    &cfg.tracker,
                    variant,
                    &out,
                )
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    summaries.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    for s in &summaries {
        let iou = s.mean_iou.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        ui.note(format!("{}: {} frames", s.sequence, s.frames));
        println!(
            "{} {}: mean IoU {iou}, {:.1} fps, {} updates",
            s.tracker, s.sequence, s.mean_fps, s.updates
        );
    }
    println!("tracks written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- evaluation

/// Boxes of a `frame,x,y,width,height,confidence` CSV.
pub fn read_track_csv(path: &Path) -> CliResult<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| {
                CliError::Data(format!(
                    "{}:{}: malformed row {line:?}",
                    path.display(),
                    i + 1
                ))
            })?;
        if f.len() < 5 {
            return Err(CliError::Data(format!(
                "{}:{}: expected 6 columns",
                path.display(),
                i + 1
            )));
        }
        out.push(BBox::new(f[1], f[2], f[3], f[4]));
    }
    Ok(out)
}

fn read_timing_csv(path: &Path) -> CliResult<Vec<f64>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .skip(2)
        .filter_map(|l| l.split(',').nth(1)?.parse().ok())
        .collect())
}

fn subdirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Evaluates every `<dir>/<sequence>/track.csv` against
/// `<truth>/<sequence>/groundtruth.txt`.
pub fn evaluate_tracker(name: &str, dir: &Path, truth: &Path) -> CliResult<EvalReport> {
    let mut reports = Vec::new();
    let mut seconds = Vec::new();
    for d in subdirs(dir)? {
        let csv = d.join("track.csv");
        if !csv.exists() {
            continue;
        }
        let seq = sequence_name(&d);
        let tdir = truth.join(&seq);
        let gt = read_boxes(&tdir.join("groundtruth.txt"))?;
        let pred = read_track_csv(&csv)?;
        reports.push(score_sequence(
            &seq,
            &pred,
            &gt,
            directory_attributes(&tdir)?,
        )?);
        seconds.extend(read_timing_csv(&d.join("timing.csv"))?);
    }
    if reports.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no <sequence>/track.csv found",
            dir.display()
        )));
    }
    Ok(EvalReport::new(name, reports, &seconds))
}

fn write_report(dir: &Path, stem: &str, r: &EvalReport) -> CliResult<()> {
    write_json(&dir.join(format!("{stem}.json")), r)?;
    write(&dir.join(format!("{stem}.curve.csv")), r.curve_csv())?;
    write(&dir.join(format!("{stem}.iou.csv")), r.iou_csv())
}

fn svg(reports: &[EvalReport]) -> String {
    let curves: Vec<(&str, &[f64], f64)> = reports
        .iter()
        .map(|r| (r.tracker.as_str(), r.success.as_slice(), r.auc))
        .collect();
    success_plot_svg(&curves)
}

fn cmd_eval(
    cfg: &RunConfig,
    ui: &Ui,
    truth: &Path,
    trackers: &[String],
    out: Option<&Path>,
) -> CliResult<()> {
    let list: Vec<(String, PathBuf)> = if trackers.is_empty() {
        subdirs(&cfg.output.join("track"))?
            .into_iter()
            .map(|d| (sequence_name(&d), d))
            .collect()
    } else {
        trackers
            .iter()
            .map(|t| {
                t.split_once('=')
                    .map(|(n, d)| (n.to_string(), PathBuf::from(d)))
                    .ok_or_else(|| {
                        CliError::Config(format!("--tracker expects NAME=DIR, got {t:?}"))
                    })
            })
            .collect::<CliResult<_>>()?
    };
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.join("eval"));
    cfg.echo(&out)?;
    let mut reports = Vec::new();
    for (name, dir) in &list {
        ui.note(format!("evaluating {name} from {}", dir.display()));
        let r = evaluate_tracker(name, dir, truth)?;
        write_report(&out, name, &r)?;
        println!(
            "{name}: AUC {:.3}, mean IoU {:.3} over {} sequences / {} frames",
            r.auc,
            r.mean_iou,
            r.sequences.len(),
            r.frames
        );
        reports.push(r);
    }
    write(&out.join("success.svg"), svg(&reports))?;
    println!("reports written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- ablation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_iou: f64,
    pub auc: f64,
    pub mean_fps: Option<f64>,
    pub per_sequence: Vec<(String, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub suite: String,
    pub sequences: Vec<(String, u64)>,
    pub frames: usize,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.label())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "suite {}: {} sequences, {} frames, seed {}",
            self.suite,
            self.sequences.len(),
            self.frames,
            self.seed
        );
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>7} {:>8}",
            "variant", "mean_iou", "auc", "fps"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>8.3} {:>7.3} {:>8.1}",
                r.variant,
                r.mean_iou,
                r.auc,
                r.mean_fps.unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(s, "\nper sequence (mean IoU):");
        let _ = write!(s, "{:<16}", "sequence");
        for r in &self.rows {
            let _ = write!(s, " {:>10}", r.variant);
        }
        let _ = writeln!(s);
        for (i, (name, _)) in self.sequences.iter().enumerate() {
            let _ = write!(s, "{name:<16}");
            for r in &self.rows {
                let _ = write!(s, " {:>10.3}", r.per_sequence[i].1);
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Runs every variant over the configured suite.
pub fn run_ablation(
    cfg: &RunConfig,
    ui: &Ui,
    matcher: &MatcherWeights,
    theta: &MetaWeights,
) -> CliResult<(AblationTable, Vec<EvalReport>)> {
    let mut seqs = suite_sequences(cfg, &cfg.suite)?;
    seqs.sort_by(|a, b| a.name.cmp(&b.name));
    let jobs: Vec<(Variant, &AnnotatedSequence)> = Variant::ALL
        .iter()
        .flat_map(|&v| seqs.iter().map(move |s| (v, s)))
        .collect();
    let pool = thread_pool(cfg)?;
    let tracks = pool.install(|| {
        jobs.par_iter()
            .map(|(v, s)| {
                let theta = (*v == Variant::Meta).then_some(theta);
                let t = track_sequence(&s.frames, &s.boxes[0], matcher, theta, &cfg.tracker, *v)?;
                ui.note(format!("{} {}: done", v.label(), s.name));
                Ok(t)
            })
            .collect::<CliResult<Vec<Track>>>()
    })?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (vi, v) in Variant::ALL.iter().enumerate() {
        let mut seq_reports = Vec::new();
        let mut seconds = Vec::new();
        for (si, s) in seqs.iter().enumerate() {
            let t = &tracks[vi * seqs.len() + si];
            seq_reports.push(score_sequence(&s.name, &t.boxes(), &s.boxes, s.attributes)?);
            seconds.extend_from_slice(&t.seconds[1..]);
        }
        let r = EvalReport::new(v.label(), seq_reports, &seconds);
        rows.push(AblationRow {
            variant: v.label().to_string(),
            mean_iou: r.mean_iou,
            auc: r.auc,
            mean_fps: r.fps.as_ref().map(|f| f.mean_fps),
            per_sequence: r
                .sequences
                .iter()
                .map(|q| (q.name.clone(), q.mean_iou, q.auc))
                .collect(),
        });
        reports.push(r);
    }
    let table = AblationTable {
        suite: cfg.suite.clone(),
        sequences: seqs
            .iter()
            .map(|s| (s.name.clone(), s.spec.as_ref().map_or(0, |p| p.seed)))
            .collect(),
        frames: seqs.iter().map(|s| s.len()).sum(),
        seed: cfg.seed,
        rows,
    };
    Ok((table, reports))
}

fn cmd_ablation(cfg: &RunConfig, ui: &Ui) -> CliResult<()> {
    let matcher = load_matcher(cfg)?;
    let theta = load_meta(cfg, &matcher)?;
    let out = cfg.output.join("ablation").join(&cfg.suite);
    cfg.echo(&out)?;
    let (table, reports) = run_ablation(cfg, ui, &matcher, &theta)?;
    for r in &reports {
        write_report(&out, variant_dir_label(&r.tracker), r)?;
    }
    write_json(&out.join("table.json"), &table)?;
    let text = table.to_text();
    write(&out.join("table.txt"), &text)?;
    write(&out.join("success.svg"), svg(&reports))?;
    print!("{text}");
    println!("written to {}", out.display());
    Ok(())
}

fn variant_dir_label(label: &str) -> &'static str {
    Variant::ALL
        .iter()
        .find(|v| v.label() == label)
        .map(|v| variant_dir(*v))
        .unwrap_or("tracker")
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub variant: String,
    pub frames: usize,
    pub warmup: usize,
    pub all: FpsStats,
    pub update_frames: usize,
    pub with_updates: Option<FpsStats>,
    pub without_updates: Option<FpsStats>,
    /// Digest of the track CSV; equal across runs with the same config.
    pub digest: String,
}

/// The synthetic benchmark sequence.
pub fn bench_sequence(cfg: &RunConfig) -> CliResult<AnnotatedSequence> {
    let spec = WorldSpec {
        length: cfg.bench_warmup + cfg.bench_frames + 1,
        max_speed: 1.5,
        drift: 0.003,
        scale_walk: 0.005,
        distractors: 2,
        similarity: 0.5,
        noise: 0.02,
        seed: cfg.seed,
        ..WorldSpec::default()
    };
    Ok(generate_named(&spec, "bench".into())?)
}

pub fn run_bench(
    cfg: &RunConfig,
    matcher: &MatcherWeights,
    theta: Option<&MetaWeights>,
) -> CliResult<BenchReport> {
    let seq = bench_sequence(cfg)?;
    let variant = if theta.is_some() {
        Variant::Meta
    } else {
        Variant::MatchOnly
    };
    let track = track_sequence(
        &seq.frames,
        &seq.boxes[0],
        matcher,
        theta,
        &cfg.tracker,
        variant,
    )?;
    let timed = 1 + cfg.bench_warmup;
    let (mut up, mut plain) = (Vec::new(), Vec::new());
    for (r, t) in track.results[timed..].iter().zip(&track.seconds[timed..]) {
        if r.updated {
            up.push(*t);
        } else {
            plain.push(*t);
        }
    }
    Ok(BenchReport {
        variant: variant.label().to_string(),
        frames: cfg.bench_frames,
        warmup: cfg.bench_warmup,
        all: FpsStats::from_seconds(&track.seconds[timed..])
            .ok_or_else(|| CliError::Config("no timed frames".into()))?,
        update_frames: up.len(),
        with_updates: FpsStats::from_seconds(&up),
        without_updates: FpsStats::from_seconds(&plain),
        digest: digest(track.to_csv().as_bytes()),
    })
}

fn cmd_bench(cfg: &RunConfig, ui: &Ui, no_meta: bool) -> CliResult<()> {
    let matcher = load_matcher(cfg)?;
    let theta = if no_meta {
        None
    } else {
        Some(load_meta(cfg, &matcher)?)
    };
    let out = cfg.output.join("bench");
    cfg.echo(&out)?;
    ui.note(format!(
        "timing {} frames after {} warmup frames",
        cfg.bench_frames, cfg.bench_warmup
    ));
    let r = run_bench(cfg, &matcher, theta.as_ref())?;
    write_json(&out.join("bench.json"), &r)?;
    let line = |name: &str, s: &Option<FpsStats>, n: usize| {
        match s {
        Some(s) => format!(
            "{name:<16} {n:>5} frames  mean {:>7.2} ms  median {:>7.2} ms  p99 {:>7.2} ms  {:>7.1} fps",
            s.mean_ms, s.median_ms, s.p99_ms, s.mean_fps
        ),
        None => format!("{name:<16} {n:>5} frames"),
    }
    };
    println!("{} on the {} preset", r.variant, cfg.preset);
    println!("{}", line("all frames", &Some(r.all.clone()), r.frames));
    println!(
        "{}",
        line("update frames", &r.with_updates, r.update_frames)
    );
    println!(
        "{}",
        line(
            "other frames",
            &r.without_updates,
            r.frames - r.update_frames
        )
    );
    println!("output digest {}", r.digest);
    Ok(())
}
