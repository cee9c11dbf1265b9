//! `tokrag`: theory sweeps, probing, retrieval, collaborative decoding and
//! benefit/detriment evaluation from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(String),
}

impl From<tokrag_core::Error> for CliError {
    fn from(e: tokrag_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tokrag", version, about = "Token-level benefit/detriment tools for retrieval-augmented generation")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Exact,
    Matching,
    PureLm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep oracle worlds and check the distance bounds and decision rule.
    VerifyTheory {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of world seeds, starting at `--seed`.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Layer-wise attention and distribution-change series for one query.
    Probe {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        /// Threshold on the distribution-change series.
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a BM25 index from a JSONL corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query a BM25 index.
    Search {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Collaborative greedy decoding.
    Decode {
        /// Weight file, or `oracle`.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Decode with the oracle world from the config.
        #[arg(long)]
        oracle: bool,
        /// Text for a weight file; space-separated token ids for the oracle.
        #[arg(long, default_value = "")]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benefit/detriment classification with AUC and F1.
    EvalBd {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Use the constructed oracle world suite.
        #[arg(long)]
        oracle: bool,
        /// Plain-text sentences, one per line.
        #[arg(long)]
        sentences: Option<PathBuf>,
        #[arg(long, default_value = "tokrag,logprobs,entropy,consistency")]
        methods: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded random-init weights, optionally with a vocabulary built
    /// from a corpus.
    GenModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("thread pool configured once");
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Config(_) => 3,
                CliError::Run(_) => 1,
            })
        }
    }
}
