//! Command-line entry point.
//!
//! Every subcommand reads a flat `key = value` config (plus `--set`
//! overrides), writes its artifacts into a fresh run directory and records
//! a `manifest.json` there: the effective config and its hash, the seed,
//! format versions, and the sha256 of every input and artifact. Passing
//! that manifest back with `--from-manifest` repeats the run.

mod commands;
mod run;

use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

pub use run::{RunContext, RunManifest, MANIFEST_FILE, TIMING_FILE};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Environment variable holding the bearer token of the annotation model.
pub const TOKEN_ENV: &str = "RATLAB_LLM_TOKEN";

#[derive(Debug, Parser)]
#[command(name = "ratlab", version, about = "Tiny transformer lab: layer selection, retrieval workflow, data pipeline, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=<n>`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `runs/<subcommand>-<config hash>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
    /// Repeat the run recorded in a manifest.
    #[arg(long, conflicts_with = "config")]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train a toy model (synthetic corpus unless `data.corpus` is set).
    PretrainToy(RunArgs),
    /// Print the per-layer redundancy profile of a model.
    Profile(RunArgs),
    /// Print and save the layer-selection plan.
    Plan(RunArgs),
    /// Run one curriculum stage (or an N ablation with `ablation.n`).
    TrainStage(RunArgs),
    /// Run two curriculum stages and report forgetting.
    TwoStage(RunArgs),
    /// Validate a knowledge base and build its index.
    RagIndex(RunArgs),
    /// Look up a truncated key and print the ranked matches.
    RagQuery {
        #[command(flatten)]
        run: RunArgs,
        /// Shorthand for `--set query=<key>`.
        #[arg(long)]
        key: Option<String>,
    },
    /// Answer queries with the two-pass retrieval workflow.
    RagAnswer(RunArgs),
    /// Generate instruction data from seeds, records and unlabeled text.
    Datagen(RunArgs),
    /// Score a model on the tasks of an evaluation manifest.
    Eval(RunArgs),
    /// Combine evaluation results into a table.
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// Shorthand for `--set layout=<layout>`.
        #[arg(long)]
        layout: Option<String>,
    },
}

impl Command {
    fn split(self) -> (&'static str, RunArgs, Vec<String>) {
        match self {
            Command::PretrainToy(r) => ("pretrain-toy", r, vec![]),
            Command::Profile(r) => ("profile", r, vec![]),
            Command::Plan(r) => ("plan", r, vec![]),
            Command::TrainStage(r) => ("train-stage", r, vec![]),
            Command::TwoStage(r) => ("two-stage", r, vec![]),
            Command::RagIndex(r) => ("rag-index", r, vec![]),
            Command::RagQuery { run, key } => ("rag-query", run, key.map(|k| format!("query={k}")).into_iter().collect()),
            Command::RagAnswer(r) => ("rag-answer", r, vec![]),
            Command::Datagen(r) => ("datagen", r, vec![]),
            Command::Eval(r) => ("eval", r, vec![]),
            Command::Report { run, layout } => ("report", run, layout.map(|l| format!("layout={l}")).into_iter().collect()),
        }
    }
}

/// Exit code for a library error: config problems are 3, the rest 4.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Runs one command line (`argv[0]` is the program name) and returns the
/// process exit code. Output goes to stdout, diagnostics to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return EXIT_OK;
            }
            let _ = e.print();
            if e.kind() == clap::error::ErrorKind::InvalidSubcommand {
                eprintln!("\n{}", Cli::command().render_long_help());
            }
            return EXIT_USAGE;
        }
    };
    let (name, args, shorthands) = cli.command.split();
    match run::execute(name, &args, &shorthands) {
        Ok(()) => EXIT_OK,
        Err(run::Failure { code, message }) => {
            eprintln!("error: {message}");
            code
        }
    }
}
