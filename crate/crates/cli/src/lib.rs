//! `longhorn` command suite.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values; exit code 2.
    Config(String),
    /// A verification or acceptance check failed; exit code 1.
    Check(String),
    Core(longhorn_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Check(_) | CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<longhorn_core::Error> for CliError {
    fn from(e: longhorn_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(std::io::Error::other(e).into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "longhorn", version, about = "Verify, train, evaluate and benchmark Longhorn sequence models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    #[arg(long, global = true, value_parser = ["longhorn", "la", "retnet", "gla", "griffin", "hgrn2", "mamba"])]
    pub kernel: Option<String>,
    /// Directory under which the run directory is created.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the oracle suite and report every check with its margin.
    Verify {
        /// Deliberately break the closed-form step to exercise the suite.
        #[arg(long, hide = true, value_parser = ["delta-sign"])]
        inject_fault: Option<String>,
    },
    /// Train on multi-query associative recall, sweeping the learning-rate grid.
    TrainMqar {
        /// Train once at train.peak_lr instead of sweeping.
        #[arg(long)]
        no_sweep: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a byte-level language model.
    TrainLm {
        /// Text files forming the corpus.
        #[arg(long = "corpus", num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Perplexity at multiples of the training context.
    EvalExtrapolate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        factors: Option<Vec<usize>>,
        #[arg(long = "corpus", num_args = 1..)]
        corpus: Vec<PathBuf>,
    },
    /// Wall time of sequential, parallel and chunked scans.
    BenchScan {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Greedy continuation of a prompt from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// File config with global flags applied.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = global.threads {
        cfg.run.threads = t;
    }
    if let Some(p) = &global.precision {
        cfg.run.precision = p.parse().map_err(|_| CliError::Config(format!("precision {p}")))?;
    }
    if let Some(k) = &global.kernel {
        cfg.model.kernel = k.clone();
    }
    if let Some(o) = &global.out {
        cfg.run.out = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli.global)?;
    if cfg.run.threads > 0 {
        // a pool may already exist when called more than once in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global();
    }
    match cli.command {
        Command::Verify { inject_fault } => commands::verify(&cfg, inject_fault.is_some()),
        Command::TrainMqar { no_sweep, steps } => {
            if no_sweep {
                cfg.mqar.lr_grid.clear();
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            commands::train_mqar(&cfg)
        }
        Command::TrainLm { corpus, steps } => {
            if !corpus.is_empty() {
                cfg.lm.corpus = corpus;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            commands::train_lm(&cfg)
        }
        Command::EvalExtrapolate {
            checkpoint,
            factors,
            corpus,
        } => {
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            if let Some(f) = factors {
                cfg.eval.factors = f;
            }
            if !corpus.is_empty() {
                cfg.lm.corpus = corpus;
            }
            commands::eval_extrapolate(&cfg)
        }
        Command::BenchScan {
            lengths,
            d,
            m,
            repeats,
        } => {
            let b = &mut cfg.bench;
            if let Some(l) = lengths {
                b.lengths = l;
            }
            b.d = d.unwrap_or(b.d);
            b.m = m.unwrap_or(b.m);
            b.repeats = repeats.unwrap_or(b.repeats);
            commands::bench_scan(&cfg)
        }
        Command::Sample {
            checkpoint,
            prompt,
            steps,
        } => {
            if checkpoint.is_some() {
                cfg.sample.checkpoint = checkpoint;
            }
            if let Some(p) = prompt {
                cfg.sample.prompt = p;
            }
            if let Some(s) = steps {
                cfg.sample.steps = s;
            }
            commands::sample(&cfg)
        }
    }
}
