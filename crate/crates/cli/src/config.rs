//! Run configuration: flat `key = value` files, `--set` overrides and
//! per-command flags, resolved over preset-dependent defaults.
//!
//! Precedence, lowest first: built-in defaults for the chosen preset, the
//! `--config` file, `--set key=value` flags in order, dedicated command
//! flags. The preset is resolved first so every other default follows it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mlt_core::manifest::Manifest;
use mlt_core::matcher::{LossWeighting, MatcherConfig, Preset};
use mlt_core::meta::MetaConfig;
use mlt_core::tracker::TrackerParams;
use mlt_core::world::RasterFormat;

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "MLT_OUTPUT";
pub const DEFAULT_OUTPUT: &str = "runs";
pub const MIN_BENCH_FRAMES: usize = 500;

/// Where an override came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    File(PathBuf, usize),
    Flag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
    pub source: Source,
}

impl Override {
    pub fn flag(key: &str, value: impl ToString) -> Self {
        Override {
            key: key.to_string(),
            value: value.to_string(),
            source: Source::Flag,
        }
    }

    /// Parses `key=value`.
    pub fn parse_flag(s: &str) -> Result<Self, CliError> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
        Ok(Self::flag(k.trim(), v.trim()))
    }
}

/// Reads a config file into overrides, keeping line numbers.
pub fn read_file(path: &Path) -> Result<Vec<Override>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                i + 1
            ))
        })?;
        out.push(Override {
            key: k.trim().to_string(),
            value: v.trim().to_string(),
            source: Source::File(path.to_path_buf(), i + 1),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output: PathBuf,
    pub checkpoints: PathBuf,
    pub data: PathBuf,
    /// Worker threads for sequence fan-out; 0 uses all cores.
    pub threads: usize,
    pub format: RasterFormat,

    pub matcher: MatcherConfig,
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub train_sequences: usize,
    pub train_length: usize,

    pub meta: MetaConfig,
    pub meta_iterations: usize,
    pub meta_batch: usize,
    pub meta_lr: f64,
    pub meta_calibration: usize,
    pub heldout_episodes: usize,
    pub heldout_sequences: usize,
    pub heldout_length: usize,

    pub tracker: TrackerParams,

    pub suite: String,
    /// Sequences taken from the suite; 0 keeps all.
    pub suite_count: usize,
    /// Frames per suite sequence; 0 keeps the built-in length.
    pub suite_length: usize,

    pub bench_frames: usize,
    pub bench_warmup: usize,
}

/// Every accepted key with its documentation.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "network and meta-learner geometry: desk | paper"),
    (
        "seed",
        "master seed; every stage derives its streams from it",
    ),
    ("output", "output root (default $MLT_OUTPUT, else ./runs)"),
    (
        "checkpoints",
        "checkpoint directory (default <output>/checkpoints)",
    ),
    ("data", "generated data directory (default <output>/data)"),
    (
        "threads",
        "worker threads for sequence fan-out, 0 = all cores",
    ),
    ("format", "frame format written by gen-data: ppm | raw"),
    (
        "matcher.label_radius",
        "radius in response cells of the positive label disc",
    ),
    (
        "matcher.response_scale",
        "multiplier applied to raw cross-correlation scores",
    ),
    (
        "matcher.weighting",
        "loss weighting of positive and negative cells: balanced | uniform",
    ),
    ("pretrain.iterations", "matcher training iterations"),
    (
        "pretrain.batch",
        "exemplar/search pairs per matcher iteration",
    ),
    ("pretrain.lr", "Adam learning rate of matcher training"),
    ("train.sequences", "synthetic training sequences"),
    ("train.length", "frames per training sequence"),
    (
        "meta.m",
        "patches forming the gradient input, also samples per tracker update",
    ),
    (
        "meta.m_prime",
        "patches each generated update is scored on during training",
    ),
    (
        "meta.keep_prob",
        "dropout keep probability of the meta-learner",
    ),
    ("meta.iterations", "meta-learner training iterations"),
    ("meta.batch", "episodes per meta-learner iteration"),
    ("meta.lr", "Adam learning rate of meta-learner training"),
    (
        "meta.calibration",
        "episodes used to fix the meta-learner input gain",
    ),
    (
        "heldout.episodes",
        "held-out episodes scored after meta-learner training",
    ),
    (
        "heldout.sequences",
        "synthetic sequences the held-out episodes come from",
    ),
    ("heldout.length", "frames per held-out sequence"),
    (
        "tracker.scales",
        "comma-separated search scales, must contain 1",
    ),
    (
        "tracker.scale_penalty",
        "multiplier applied to peaks at scales other than 1",
    ),
    (
        "tracker.scale_damping",
        "fraction of the chosen scale change applied to the size",
    ),
    (
        "tracker.window_influence",
        "weight of the Hann window in the displacement prior",
    ),
    (
        "tracker.update_period",
        "frames between meta-learner updates",
    ),
    (
        "tracker.confidence_threshold",
        "minimum peak confidence for a frame to enter memory",
    ),
    (
        "tracker.memory_capacity",
        "memory entries kept, oldest evicted first",
    ),
    (
        "tracker.finetune_period",
        "frames between fine-tuning rounds of the baseline",
    ),
    (
        "tracker.finetune_iterations",
        "Adam steps per fine-tuning round",
    ),
    ("tracker.finetune_lr", "learning rate of fine-tuning"),
    (
        "tracker.min_scale",
        "smallest target size relative to the initial size",
    ),
    (
        "tracker.max_scale",
        "largest target size relative to the initial size",
    ),
    ("suite", "synthetic evaluation suite: easy | distractors"),
    ("suite.count", "sequences taken from the suite, 0 = all"),
    (
        "suite.length",
        "frames per suite sequence, 0 = built-in length",
    ),
    ("bench.frames", "timed frames of the throughput benchmark"),
    (
        "bench.warmup",
        "untimed frames tracked before timing starts",
    ),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for {key}")))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Defaults for `preset` with outputs under `output`.
    pub fn defaults(preset: Preset, output: PathBuf) -> Self {
        RunConfig {
            preset,
            seed: 1,
            checkpoints: output.join("checkpoints"),
            data: output.join("data"),
            output,
            threads: 0,
            format: RasterFormat::Ppm,
            matcher: MatcherConfig::for_preset(preset),
            pretrain_iterations: 2000,
            pretrain_batch: 8,
            pretrain_lr: 1e-3,
            train_sequences: 60,
            train_length: 80,
            meta: MetaConfig::for_preset(preset),
            meta_iterations: 1500,
            meta_batch: 8,
            meta_lr: 1e-3,
            meta_calibration: 16,
            heldout_episodes: 200,
            heldout_sequences: 30,
            heldout_length: 80,
            tracker: TrackerParams::for_preset(preset),
            suite: "distractors".into(),
            suite_count: 0,
            suite_length: 0,
            bench_frames: 600,
            bench_warmup: 30,
        }
    }

    /// Applies overrides over the defaults. `preset` and `output` are
    /// resolved first; paths derived from `output` follow it unless set.
    pub fn resolve(overrides: &[Override]) -> Result<Self, CliError> {
        let last = |key: &str| overrides.iter().rev().find(|o| o.key == key);
        let preset = match last("preset") {
            Some(o) => parse::<Preset>("preset", &o.value)?,
            None => Preset::Desk,
        };
        let output = match last("output") {
            Some(o) => PathBuf::from(&o.value),
            None => std::env::var_os(OUTPUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
        };
        let mut cfg = Self::defaults(preset, output);
        for o in overrides {
            cfg.set(&o.key, &o.value)
                .map_err(|e| match (&o.source, e) {
                    (Source::File(p, line), CliError::Config(m)) => {
                        CliError::Config(format!("{}:{line}: {m}", p.display()))
                    }
                    (_, e) => e,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.tracker;
        match key {
            "preset" => self.preset = parse(key, value)?,
            "output" => {}
            "seed" => self.seed = parse(key, value)?,
            "checkpoints" => self.checkpoints = PathBuf::from(value),
            "data" => self.data = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            "format" => {
                self.format = RasterFormat::parse(value).map_err(|_| {
                    CliError::Config(format!("invalid value {value:?} for format (ppm|raw)"))
                })?
            }
            "matcher.label_radius" => self.matcher.label_radius = parse(key, value)?,
            "matcher.response_scale" => self.matcher.response_scale = parse(key, value)?,
            "matcher.weighting" => {
                self.matcher.weighting = match value {
                    "balanced" => LossWeighting::Balanced,
                    "uniform" => LossWeighting::Uniform,
                    _ => {
                        return Err(CliError::Config(format!(
                            "invalid value {value:?} for {key}"
                        )))
                    }
                }
            }
            "pretrain.iterations" => self.pretrain_iterations = parse(key, value)?,
            "pretrain.batch" => self.pretrain_batch = parse(key, value)?,
            "pretrain.lr" => self.pretrain_lr = parse(key, value)?,
            "train.sequences" => self.train_sequences = parse(key, value)?,
            "train.length" => self.train_length = parse(key, value)?,
            "meta.m" => self.meta.m = parse(key, value)?,
            "meta.m_prime" => self.meta.m_prime = parse(key, value)?,
            "meta.keep_prob" => self.meta.keep_prob = parse(key, value)?,
            "meta.iterations" => self.meta_iterations = parse(key, value)?,
            "meta.batch" => self.meta_batch = parse(key, value)?,
            "meta.lr" => self.meta_lr = parse(key, value)?,
            "meta.calibration" => self.meta_calibration = parse(key, value)?,
            "heldout.episodes" => self.heldout_episodes = parse(key, value)?,
            "heldout.sequences" => self.heldout_sequences = parse(key, value)?,
            "heldout.length" => self.heldout_length = parse(key, value)?,
            "tracker.scales" => {
                t.scales = value
                    .split(',')
                    .map(|s| parse::<f64>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "tracker.scale_penalty" => t.scale_penalty = parse(key, value)?,
            "tracker.scale_damping" => t.scale_damping = parse(key, value)?,
            "tracker.window_influence" => t.window_influence = parse(key, value)?,
            "tracker.update_period" => t.update_period = parse(key, value)?,
            "tracker.confidence_threshold" => t.confidence_threshold = parse(key, value)?,
            "tracker.memory_capacity" => t.memory_capacity = parse(key, value)?,
            "tracker.finetune_period" => t.finetune_period = parse(key, value)?,
            "tracker.finetune_iterations" => t.finetune_iterations = parse(key, value)?,
            "tracker.finetune_lr" => t.finetune_lr = parse(key, value)?,
            "tracker.min_scale" => t.min_scale = parse(key, value)?,
            "tracker.max_scale" => t.max_scale = parse(key, value)?,
            "suite" => self.suite = value.to_string(),
            "suite.count" => self.suite_count = parse(key, value)?,
            "suite.length" => self.suite_length = parse(key, value)?,
            "bench.frames" => self.bench_frames = parse(key, value)?,
            "bench.warmup" => self.bench_warmup = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        self.tracker.samples = self.meta.m;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: mlt_core::Error| CliError::Config(e.to_string());
        self.matcher.validate().map_err(cfg)?;
        self.meta.validate().map_err(cfg)?;
        self.meta.check_matcher(&self.matcher).map_err(cfg)?;
        self.tracker.validate().map_err(cfg)?;
        if !mlt_core::world::SUITE_NAMES.contains(&self.suite.as_str()) {
            return Err(CliError::Config(format!(
                "unknown suite {:?} ({})",
                self.suite,
                mlt_core::world::SUITE_NAMES.join("|")
            )));
        }
        let positive = [
            ("pretrain.batch", self.pretrain_batch),
            ("meta.batch", self.meta_batch),
            ("train.sequences", self.train_sequences),
            ("heldout.sequences", self.heldout_sequences),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("{k} must be positive")));
        }
        for (k, v) in [("pretrain.lr", self.pretrain_lr), ("meta.lr", self.meta_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::Config(format!("{k} must be positive")));
            }
        }
        if self.bench_frames < MIN_BENCH_FRAMES {
            return Err(CliError::Config(format!(
                "bench.frames must be at least {MIN_BENCH_FRAMES}"
            )));
        }
        if self.train_length < 2 || self.heldout_length < 2 {
            return Err(CliError::Config(
                "training sequences need at least 2 frames".into(),
            ));
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.tracker;
        let p = |p: &Path| p.display().to_string();
        KEYS.iter()
            .map(|&(k, _)| {
                let v = match k {
                    "preset" => self.preset.to_string(),
                    "seed" => self.seed.to_string(),
                    "output" => p(&self.output),
                    "checkpoints" => p(&self.checkpoints),
                    "data" => p(&self.data),
                    "threads" => self.threads.to_string(),
                    "format" => self.format.extension().to_string(),
                    "matcher.label_radius" => self.matcher.label_radius.to_string(),
                    "matcher.response_scale" => self.matcher.response_scale.to_string(),
                    "matcher.weighting" => match self.matcher.weighting {
                        LossWeighting::Balanced => "balanced".into(),
                        LossWeighting::Uniform => "uniform".into(),
                    },
                    "pretrain.iterations" => self.pretrain_iterations.to_string(),
                    "pretrain.batch" => self.pretrain_batch.to_string(),
                    "pretrain.lr" => self.pretrain_lr.to_string(),
                    "train.sequences" => self.train_sequences.to_string(),
                    "train.length" => self.train_length.to_string(),
                    "meta.m" => self.meta.m.to_string(),
                    "meta.m_prime" => self.meta.m_prime.to_string(),
                    "meta.keep_prob" => self.meta.keep_prob.to_string(),
                    "meta.iterations" => self.meta_iterations.to_string(),
                    "meta.batch" => self.meta_batch.to_string(),
                    "meta.lr" => self.meta_lr.to_string(),
                    "meta.calibration" => self.meta_calibration.to_string(),
                    "heldout.episodes" => self.heldout_episodes.to_string(),
                    "heldout.sequences" => self.heldout_sequences.to_string(),
                    "heldout.length" => self.heldout_length.to_string(),
                    "tracker.scales" => fmt_list(&t.scales),
                    "tracker.scale_penalty" => t.scale_penalty.to_string(),
                    "tracker.scale_damping" => t.scale_damping.to_string(),
                    "tracker.window_influence" => t.window_influence.to_string(),
                    "tracker.update_period" => t.update_period.to_string(),
                    "tracker.confidence_threshold" => t.confidence_threshold.to_string(),
                    "tracker.memory_capacity" => t.memory_capacity.to_string(),
                    "tracker.finetune_period" => t.finetune_period.to_string(),
                    "tracker.finetune_iterations" => t.finetune_iterations.to_string(),
                    "tracker.finetune_lr" => t.finetune_lr.to_string(),
                    "tracker.min_scale" => t.min_scale.to_string(),
                    "tracker.max_scale" => t.max_scale.to_string(),
                    "suite" => self.suite.clone(),
                    "suite.count" => self.suite_count.to_string(),
                    "suite.length" => self.suite_length.to_string(),
                    "bench.frames" => self.bench_frames.to_string(),
                    "bench.warmup" => self.bench_warmup.to_string(),
                    _ => unreachable!("key table and entries out of sync: {k}"),
                };
                (k, v)
            })
            .collect()
    }

    /// The effective config as a loadable file, one documented key per
    /// entry.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for ((k, v), (_, doc)) in self.entries().into_iter().zip(KEYS) {
            let _ = writeln!(s, "# {doc}\n{k} = {v}");
        }
        s
    }

    /// Writes `config.txt` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }

    pub fn as_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        for (k, v) in self.entries() {
            m.set(k, v);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(pairs: &[(&str, &str)]) -> Result<RunConfig, CliError> {
        let mut o: Vec<Override> = vec![Override::flag("output", "/tmp/x")];
        o.extend(pairs.iter().map(|(k, v)| Override::flag(k, v)));
        RunConfig::resolve(&o)
    }

    #[test]
    fn defaults_follow_the_preset() {
        let d = resolve(&[]).unwrap();
        assert_eq!(d.preset, Preset::Desk);
        assert_eq!(d.tracker.samples, 4);
        assert_eq!(d.checkpoints, PathBuf::from("/tmp/x/checkpoints"));
        let p = resolve(&[("tracker.update_period", "10"), ("preset", "paper")]).unwrap();
        assert_eq!(p.matcher.search_size, 255);
        assert_eq!(p.tracker.samples, 8);
        assert_eq!(p.tracker.update_period, 10);
    }

    #[test]
    fn later_overrides_win() {
        let c = resolve(&[("seed", "3"), ("seed", "9")]).unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            resolve(&[("nope", "1")]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            resolve(&[("seed", "x")]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            resolve(&[("tracker.scales", "0.9,1.1")]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            resolve(&[("suite", "hard")]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn echoed_config_reloads_to_the_same_value() {
        let c = resolve(&[
            ("tracker.scales", "1,0.95,1.05"),
            ("meta.lr", "0.0003"),
            ("format", "raw"),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.echo(dir.path()).unwrap();
        let again =
            RunConfig::resolve(&read_file(&dir.path().join("config.txt")).unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed = 4\n\nbogus = 1\n").unwrap();
        let o = read_file(&path).unwrap();
        match RunConfig::resolve(&o) {
            Err(CliError::Config(m)) => assert!(m.contains(":4:"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut keys: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), KEYS.len());
        let c = resolve(&[]).unwrap();
        for (k, v) in c.entries() {
            let mut d = c.clone();
            d.set(k, &v).unwrap();
        }
    }
}
