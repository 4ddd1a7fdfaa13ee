//! Command-line harness: self-checks, data generation, both training
//! stages, tracking, evaluation, the variant ablation and the throughput
//! benchmark.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Override, RunConfig};
pub use error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "mlt",
    version,
    about = "Siamese tracker with a meta-learned target-aware feature space"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Precedence, lowest first: preset
/// defaults, `--config` file, `--set` flags in order, the dedicated flags.
#[derive(Debug, Args)]
pub struct Global {
    /// Flat `key = value` config file with `#` comments.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output root; defaults to $MLT_OUTPUT, else ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Model preset; `desk` runs on a laptop CPU.
    #[arg(long, global = true, value_name = "desk|paper")]
    pub preset: Option<String>,
    /// Seed for data, initialization and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppresses progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gradient checks, oracle equivalences and adaptation neutrality.
    Selftest {
        /// Seeded trials per gradient and oracle check.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Negates the analytic gradient of the named check.
        #[arg(long, value_name = "CHECK")]
        fault: Option<String>,
        /// Also writes the report as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Renders a synthetic suite to disk and verifies the round trip.
    GenData {
        /// easy | distractors | train | heldout; defaults to the `suite` key.
        #[arg(long)]
        suite: Option<String>,
        /// Sequences to render; defaults to the suite size.
        #[arg(long)]
        count: Option<usize>,
        /// Frames per sequence; defaults to the suite length.
        #[arg(long)]
        length: Option<usize>,
        /// Frame raster format.
        #[arg(long, value_name = "ppm|raw")]
        format: Option<String>,
        /// Destination; defaults to <data>/<suite>.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Trains the matching network on synthetic pairs.
    TrainMatcher {
        /// Adam iterations; overrides `pretrain.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Pairs per batch; overrides `pretrain.batch`.
        #[arg(long)]
        batch: Option<usize>,
        /// Learning rate; overrides `pretrain.lr`.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Trains the meta-learner against the frozen matcher and scores it on
    /// held-out episodes.
    TrainMeta {
        /// Adam iterations; overrides `meta.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Episodes per batch; overrides `meta.batch`.
        #[arg(long)]
        batch: Option<usize>,
        /// Learning rate; overrides `meta.lr`.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Tracks sequence directories and writes per-frame CSVs.
    Track {
        /// Directory with numbered frames and an optional groundtruth.txt.
        #[arg(long = "sequence", value_name = "DIR", required = true, num_args = 1..)]
        sequences: Vec<PathBuf>,
        /// Initial box `x,y,w,h`; defaults to the first ground-truth box.
        #[arg(long, value_name = "X,Y,W,H")]
        init: Option<String>,
        /// Matching network with fixed weights.
        #[arg(long, conflicts_with = "finetune")]
        no_meta: bool,
        /// Matching network with periodic fine-tuning.
        #[arg(long)]
        finetune: bool,
        /// Destination; defaults to <output>/track/<variant>.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Scores track CSVs against ground truth.
    Eval {
        /// Directory of sequence directories with groundtruth.txt.
        #[arg(long, value_name = "DIR")]
        truth: PathBuf,
        /// `NAME=DIR` with DIR holding <sequence>/track.csv; repeatable.
        /// Defaults to every directory under <output>/track.
        #[arg(long = "tracker", value_name = "NAME=DIR")]
        trackers: Vec<String>,
        /// Destination; defaults to <output>/eval.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Runs all three tracker variants over a synthetic suite.
    Ablation {
        /// easy | distractors | train | heldout; defaults to the `suite` key.
        #[arg(long)]
        suite: Option<String>,
        /// Sequences to run; defaults to the whole suite.
        #[arg(long)]
        count: Option<usize>,
        /// Frames per sequence; defaults to the suite length.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Times single-session tracking on a synthetic sequence.
    Bench {
        /// Timed frames; at least 500.
        #[arg(long)]
        frames: Option<usize>,
        /// Untimed frames tracked first.
        #[arg(long)]
        warmup: Option<usize>,
        /// Times the matching network without meta updates.
        #[arg(long)]
        no_meta: bool,
    },
}

impl Cli {
    /// Overrides in precedence order.
    pub fn overrides(&self) -> CliResult<Vec<Override>> {
        let g = &self.global;
        let mut o = match &g.config {
            Some(p) => config::read_file(p)?,
            None => Vec::new(),
        };
        for s in &g.set {
            o.push(Override::parse_flag(s)?);
        }
        if let Some(v) = &g.output {
            o.push(Override::flag("output", v.display()));
        }
        if let Some(v) = &g.preset {
            o.push(Override::flag("preset", v));
        }
        if let Some(v) = g.seed {
            o.push(Override::flag("seed", v));
        }
        let mut opt = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(Override::flag(k, v));
            }
        };
        let s = |v: &Option<usize>| v.map(|x| x.to_string());
        match &self.command {
            Command::GenData {
                count,
                length,
                format,
                ..
            } => {
                opt("suite.count", s(count));
                opt("suite.length", s(length));
                opt("format", format.clone());
            }
            Command::TrainMatcher {
                iterations,
                batch,
                lr,
            } => {
                opt("pretrain.iterations", s(iterations));
                opt("pretrain.batch", s(batch));
                opt("pretrain.lr", lr.map(|x| x.to_string()));
            }
            Command::TrainMeta {
                iterations,
                batch,
                lr,
            } => {
                opt("meta.iterations", s(iterations));
                opt("meta.batch", s(batch));
                opt("meta.lr", lr.map(|x| x.to_string()));
            }
            Command::Ablation {
                suite,
                count,
                length,
            } => {
                opt("suite", suite.clone());
                opt("suite.count", s(count));
                opt("suite.length", s(length));
            }
            Command::Bench { frames, warmup, .. } => {
                opt("bench.frames", s(frames));
                opt("bench.warmup", s(warmup));
            }
            _ => {}
        }
        Ok(o)
    }
}

/// Resolves the config and runs the command.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = RunConfig::resolve(&cli.overrides()?)?;
    commands::dispatch(cli, &cfg)
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::CONFIG
            } else {
                exit::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("mlt: {e}");
            e.exit_code()
        }
    }
}
