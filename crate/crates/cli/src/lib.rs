//! The `transducer` command line: corpus generation, training, decoding, alignment
//! exports and context-window sweeps.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use transducer_core::corpus::CorpusError;
use transducer_core::decoder::{DecodeError, PromptMode, Sampling, Window};
use transducer_core::lattice::LatticeError;
use transducer_core::model::ModelError;
use transducer_core::trainer::TrainError;

pub mod commands;
pub mod config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    /// 1 I/O, 2 usage, 3 numerical failure, 4 artifact mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Spec(_) => CliError::Usage(e.to_string()),
            CorpusError::Io { .. } | CorpusError::Parse { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<LatticeError> for CliError {
    fn from(e: LatticeError) -> Self {
        match e {
            LatticeError::NonFinite { .. } | LatticeError::Degenerate => CliError::Numerical(e.to_string()),
            _ => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } | ModelError::Format(_) => CliError::Io(e.to_string()),
            ModelError::Lattice(inner) => inner.into(),
            _ => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(inner) => inner.into(),
            TrainError::Lattice(inner) => inner.into(),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::EmptyBatch | TrainError::EmptyCorpus => CliError::Usage(e.to_string()),
            TrainError::MissingState(_) => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Model(inner) => inner.into(),
            DecodeError::Lattice(inner) => inner.into(),
            DecodeError::Options(_) | DecodeError::EmptyPseudoPrompt | DecodeError::EmptyTarget => {
                CliError::Usage(e.to_string())
            }
            DecodeError::StepBudget { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "transducer", version, about = "Decoder-only transducer experiments on a synthetic task")]
pub struct Cli {
    /// Root that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// Process utterances one at a time instead of on the thread pool.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model and write checkpoints plus loss.csv.
    Train(TrainArgs),
    /// Decode a corpus and score it against the references.
    Decode(DecodeArgs),
    /// Forced alignments and forward/backward/posterior maps.
    Align(AlignArgs),
    /// Token error rate over a range of history window sizes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Task spec file; the default task when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub len_min: usize,
    #[arg(long, default_value_t = 24)]
    pub len_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Concatenate groups of this many utterances into long ones.
    #[arg(long)]
    pub concat: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Model and trainer settings; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the config seed for both initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Plain,
    Prompt,
    PseudoPrompt,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => PromptMode::Plain,
            ModeArg::Prompt => PromptMode::Prompt,
            ModeArg::PseudoPrompt => PromptMode::PseudoPrompt,
        }
    }
}

/// `greedy`, `temp:TAU` or `topk:K`.
pub fn parse_sampling(s: &str) -> Result<Sampling, String> {
    match s.split_once(':') {
        None if s == "greedy" => Ok(Sampling::Greedy),
        Some(("temp", tau)) => tau
            .parse::<f64>()
            .ok()
            .filter(|t| *t > 0.0 && t.is_finite())
            .map(Sampling::Temperature)
            .ok_or_else(|| format!("bad temperature {tau:?}")),
        Some(("topk", k)) => k
            .parse::<usize>()
            .ok()
            .filter(|k| *k >= 1)
            .map(Sampling::TopK)
            .ok_or_else(|| format!("bad k {k:?}")),
        _ => Err(format!("expected greedy, temp:TAU or topk:K, got {s:?}")),
    }
}

/// `N,M` with either side `unbounded`.
pub fn parse_window(s: &str) -> Result<Window, String> {
    let (n, m) = s.split_once(',').ok_or_else(|| format!("expected N,M, got {s:?}"))?;
    Ok(Window {
        n: parse_bound(n)?,
        m: parse_bound(m)?,
    })
}

/// A size or `unbounded`.
pub fn parse_bound(s: &str) -> Result<Option<usize>, String> {
    match s.trim() {
        "unbounded" => Ok(None),
        v => v.parse().map(Some).map_err(|_| format!("bad size {v:?}")),
    }
}

/// History sizes for a sweep; `None` is the unwindowed row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NList(pub Vec<Option<usize>>);

/// Comma-separated sizes, `unbounded` allowed.
pub fn parse_n_list(s: &str) -> Result<NList, String> {
    s.split(',').map(parse_bound).collect::<Result<_, _>>().map(NList)
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Plain)]
    pub mode: ModeArg,
    #[arg(long, value_parser = parse_window)]
    pub window: Option<Window>,
    #[arg(long, value_parser = parse_sampling, default_value = "greedy")]
    pub sampling: Sampling,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = transducer_core::decoder::DEFAULT_MAX_STEPS_PER_PHONEME)]
    pub max_steps: usize,
    /// One result record per utterance.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub long_corpus: PathBuf,
    #[arg(long, value_parser = parse_n_list, default_value = "0,2,5,10,20,unbounded")]
    pub n_list: NList,
    #[arg(long, default_value_t = 15)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = transducer_core::decoder::DEFAULT_MAX_STEPS_PER_PHONEME)]
    pub max_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command; the summary goes to stdout.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.render().to_string()))?;
    commands::dispatch(&cli)
}
