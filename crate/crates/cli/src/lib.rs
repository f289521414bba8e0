//! Command-line pipeline: synthesize or ingest a corpus, sample temporal
//! moments, generate pseudo queries, train the retrieval model and evaluate
//! it against annotated queries.

pub mod commands;
pub mod config;
pub mod ioutil;
pub mod jsonlog;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Ctx;
use config::{load_config, SampleMethod};

#[derive(Debug, Parser)]
#[command(name = "mpgn", version, about = "Pseudo-supervised video corpus moment retrieval pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Dotted-key config overrides, e.g. --set train.epochs=10.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus with planted alignments.
    Synth,
    /// Validate an external corpus manifest and report its shape.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Sample temporal moments from a corpus.
    Sample {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "subtitle")]
        method: SampleMethod,
    },
    /// Generate modal-specific pseudo queries for sampled moments.
    Generate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        moments: Option<PathBuf>,
    },
    /// Train the video-language model on pseudo queries.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Resume from an epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also train on annotated queries (off by default).
        #[arg(long)]
        supervised: bool,
    },
    /// Evaluate a checkpoint against annotated queries.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Free-form label recorded in the report.
        #[arg(long)]
        label: Option<String>,
    },
    /// Render a markdown table from one or more eval reports.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth => "synth",
        Command::Ingest { .. } => "ingest",
        Command::Sample { .. } => "sample",
        Command::Generate { .. } => "generate",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Report { .. } => "report",
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let ctx = Ctx::new(cli.out.clone(), cfg, command_name(&cli.command))?;
    match &cli.command {
        Command::Synth => commands::cmd_synth(&ctx),
        Command::Ingest { manifest } => commands::cmd_ingest(&ctx, manifest),
        Command::Sample { corpus, method } => {
            commands::cmd_sample(&ctx, corpus.as_deref(), *method)
        }
        Command::Generate { corpus, moments } => {
            commands::cmd_generate(&ctx, corpus.as_deref(), moments.as_deref())
        }
        Command::Train {
            corpus,
            queries,
            resume,
            supervised,
        } => commands::cmd_train(
            &ctx,
            corpus.as_deref(),
            queries.as_deref(),
            resume.as_deref(),
            *supervised,
        ),
        Command::Eval {
            corpus,
            checkpoint,
            queries,
            label,
        } => commands::cmd_eval(
            &ctx,
            corpus.as_deref(),
            checkpoint.as_deref(),
            queries.as_deref(),
            label.as_deref(),
        ),
        Command::Report { inputs, output } => {
            commands::cmd_report(&ctx, inputs, output.as_deref())
        }
    }
}

/// Exit codes: 0 success, 1 validation/configuration error, 2 provider
/// failure budget exceeded.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit zero; parse errors exit one.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            let budget_exceeded = err.chain().any(|cause| {
                matches!(
                    cause.downcast_ref::<mpgn_core::querygen::QueryGenError>(),
                    Some(mpgn_core::querygen::QueryGenError::FailureBudget { .. })
                )
            });
            jsonlog::log_event(
                "error",
                serde_json::json!({ "message": format!("{err:#}") }),
            );
            if budget_exceeded {
                2
            } else {
                1
            }
        }
    }
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}
