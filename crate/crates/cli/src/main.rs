//! `ibq` — one binary for the full experiment surface: tokenizer training,
//! quantizer comparisons, evaluation, tokenization, AR training and
//! sampling, plus the gradient-flow diagnostic suite.
//!
//! Exit codes: 0 success, 1 config/data error, 2 numeric failure.

use clap::{Parser, Subcommand};
use ibq_core::config::RunConfig;
use ibq_core::error::{Error, Result};
use ibq_core::quantize::QuantizerKind;
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

#[derive(Parser)]
#[command(name = "ibq", version, about = "Desk-scale vector-quantization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the stage-1 tokenizer described by a config file.
    TrainTokenizer {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output dir.
        #[arg(long)]
        resume: bool,
        /// Validate the config and print the parameter count, then exit.
        #[arg(long)]
        dry_run: bool,
        /// Stop after this many epochs (the schedule still spans the full
        /// configured run); resume later to finish.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train several quantizers under one config/seed and summarize.
    CompareQuantizers {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated list: ibq,naive,vqgan,lfq,softvq.
        #[arg(long, value_delimiter = ',')]
        quantizers: Vec<String>,
    },
    /// Evaluate a tokenizer checkpoint: metrics plus reconstruction PPMs.
    EvalTokenizer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config file naming the dataset (and eval split seed).
        #[arg(long)]
        data: PathBuf,
    },
    /// Encode a dataset into a token file with a tokenizer checkpoint.
    Tokenize {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <out_dir>/checkpoint.ibqa.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to <out_dir>/tokens.ibqk.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the stage-2 autoregressive model on a token file.
    TrainAr {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <out_dir>/tokens.ibqk.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Sample token grids from the AR model and decode them to PPMs.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        /// Defaults to the full vocabulary.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Gradient-flow diagnostics: all-codes vs selected-codes gradients,
    /// STE identities, finite-difference checks.
    Quantcheck {
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Number of random seeds per check.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Finite-difference instances per op.
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

fn parse_quantizers(names: &[String]) -> Result<Vec<QuantizerKind>> {
    if names.is_empty() {
        return Err(Error::Config("--quantizers needs at least one entry".into()));
    }
    names.iter().map(|n| QuantizerKind::parse(n.trim())).collect()
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainTokenizer { config, resume, dry_run, stop_after } => {
            let cfg = RunConfig::load(&config)?;
            commands::train_tokenizer(&cfg, resume, dry_run, stop_after)
        }
        Command::CompareQuantizers { config, quantizers } => {
            let cfg = RunConfig::load(&config)?;
            let kinds = parse_quantizers(&quantizers)?;
            commands::compare_quantizers(&cfg, &kinds)
        }
        Command::EvalTokenizer { checkpoint, data } => {
            let cfg = RunConfig::load(&data)?;
            commands::eval_tokenizer(&checkpoint, &cfg)
        }
        Command::Tokenize { config, checkpoint, out } => {
            let cfg = RunConfig::load(&config)?;
            commands::tokenize(&cfg, checkpoint, out)
        }
        Command::TrainAr { config, tokens, resume, stop_after } => {
            let cfg = RunConfig::load(&config)?;
            commands::train_ar(&cfg, tokens, resume, stop_after)
        }
        Command::Sample { config, class, n, seed, temperature, top_k } => {
            let cfg = RunConfig::load(&config)?;
            commands::sample(&cfg, class, n, seed, temperature, top_k)
        }
        Command::Quantcheck { k, d, batch, seeds, instances } => {
            commands::quantcheck(k, d, batch, seeds, instances)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
