//! Command-line entry point. Exit codes: 0 success, 1 invalid input or
//! usage, 2 failure while running.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{emit_report, run_generation_bench, ModelTag, ReportFormat};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{generate, InferenceConfig, PrefillMode, Sampling};
use crate::model::init_params;
use crate::schedule::trace;
use crate::trainer::{detokenize, load_checkpoint, resume, tokenize_bytes, train, Corpus};

#[derive(Debug, Parser)]
#[command(name = "mamba-desk", version, about = "Train, sample and benchmark a byte-level Mamba language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch (or resume) on a text corpus
    Train {
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Text file, or directory of .txt shards
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for metrics and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Seed for initialization and batch sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from this checkpoint instead of starting fresh
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate continuations for prompts, one per line
    Generate {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// UTF-8 text file with one prompt per line
        #[arg(long)]
        prompts: PathBuf,
        /// Maximum new tokens per prompt
        #[arg(long)]
        max_new: usize,
        /// Sampling temperature; greedy when omitted
        #[arg(long)]
        temperature: Option<f64>,
        /// Seed for temperature sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How prompts are consumed before decoding
        #[arg(long, value_enum, default_value_t = PrefillArg::Parallel)]
        prefill: PrefillArg,
        /// Chunk size for sequential prefill
        #[arg(long, default_value_t = 64)]
        chunk: usize,
    },
    /// Measure decode time and state memory as generation proceeds
    Bench {
        /// Model family to decode with
        #[arg(long, value_enum)]
        model: TagArg,
        /// Tokens to generate
        #[arg(long)]
        tokens: usize,
        /// Tokens per report window
        #[arg(long)]
        record_every: usize,
        /// Report path
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        /// Run configuration supplying the model and bench sections
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the randomly initialized weights
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the (t, lr, batch, noise_temp) trace of a schedule as CSV
    Schedule {
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// CSV output path
        #[arg(long)]
        out: PathBuf,
        /// Number of intervals sampled over [0, t_total]
        #[arg(long, default_value_t = 1000)]
        points: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrefillArg {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TagArg {
    Mamba,
    Attention,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Serialize)]
struct Completion<'a> {
    prompt: &'a str,
    completion: String,
}

#[derive(Serialize)]
struct BenchProtocol {
    model: ModelTag,
    n_tokens: usize,
    record_every: usize,
    repetitions: usize,
    warmup: usize,
    prompt_length: usize,
    timer: &'static str,
    statistic: &'static str,
    position: &'static str,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("<stdout>", e);
    match cmd {
        Command::Train {
            config,
            corpus,
            out: dir,
            seed,
            resume: from,
        } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = Corpus::load(&corpus)?;
            let report = match from {
                Some(ckpt) => resume(&load_checkpoint(&ckpt)?, &corpus, &dir)?,
                None => train(&cfg.train_options(seed), &corpus, &dir)?,
            };
            writeln!(
                err,
                "trained {} steps, {} tokens; final checkpoint {}",
                report.steps,
                report.tokens,
                report.final_checkpoint().display()
            )
            .map_err(io)?;
        }
        Command::Generate {
            checkpoint,
            prompts,
            max_new,
            temperature,
            seed,
            prefill,
            chunk,
        } => {
            let params = load_checkpoint(&checkpoint)?.params()?;
            let text = fs::read_to_string(&prompts).map_err(|e| Error::io(&prompts, e))?;
            let lines: Vec<&str> = text.lines().collect();
            let ids: Vec<Vec<usize>> = lines.iter().map(|l| tokenize_bytes(l)).collect();
            let sampling = match temperature {
                Some(tau) => Sampling::Temperature { tau, seed },
                None => Sampling::Greedy,
            };
            let icfg = InferenceConfig {
                prefill: match prefill {
                    PrefillArg::Parallel => PrefillMode::Parallel,
                    PrefillArg::Sequential => PrefillMode::Sequential,
                },
                chunk,
                max_new_tokens: max_new,
                ..InferenceConfig::default()
            };
            let outs = generate(&params, &ids, sampling, &icfg)?;
            for (prompt, o) in lines.iter().zip(outs) {
                let line = Completion {
                    prompt,
                    completion: detokenize(&o)?,
                };
                writeln!(out, "{}", serde_json::to_string(&line)?).map_err(io)?;
            }
        }
        Command::Bench {
            model,
            tokens,
            record_every,
            out: path,
            format,
            config,
            seed,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let tag = match model {
                TagArg::Mamba => ModelTag::Mamba,
                TagArg::Attention => ModelTag::Attention,
            };
            let mut bcfg = cfg.bench.clone();
            bcfg.seed = seed;
            let params = init_params(&cfg.model, seed)?;
            let records = run_generation_bench(tag, &params, tokens, record_every, &bcfg)?;
            let fmt = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            emit_report(&records, &path, fmt)?;
            let protocol = BenchProtocol {
                model: tag,
                n_tokens: tokens,
                record_every,
                repetitions: bcfg.repetitions.max(1),
                warmup: bcfg.warmup,
                prompt_length: 1,
                timer: "monotonic clock around each decode step",
                statistic: "median per window, pooled over repetitions",
                position: "context length at the end of the window",
            };
            let mut sidecar = path.clone().into_os_string();
            sidecar.push(".protocol.json");
            write_file(Path::new(&sidecar), &serde_json::to_vec_pretty(&protocol)?)?;
        }
        Command::Schedule { config, out: path, points } => {
            let cfg = RunConfig::load(&config)?;
            let rows = trace(&cfg.schedule, points)?;
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
