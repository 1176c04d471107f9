//! The `refine` command line. [`run`] parses arguments and executes one
//! subcommand; `main` only maps its result to an exit code.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use refine_core::TrainMode;

use crate::config::PipelineConfig;

/// Exit status 1: bad arguments, configuration or checkpoint/config mismatch.
pub const EXIT_USAGE: i32 = 1;
/// Exit status 2: failures while running (I/O, data, generation, training).
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: anyhow::Error) -> Self {
        Self {
            kind: ErrorKind::Usage,
            error,
        }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            error,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Runtime => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Many errors already embed their source in the message; skip repeats.
        let mut msg = self.error.to_string();
        for cause in self.error.chain().skip(1) {
            let cause = cause.to_string();
            if !msg.contains(&cause) {
                msg.push_str(": ");
                msg.push_str(&cause);
            }
        }
        f.write_str(&msg)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(
    name = "refine",
    version,
    about = "Retrieval fine-tuning with fused embeddings"
)]
pub struct Cli {
    /// JSON pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.learning_rate=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Use the deterministic offline query generator instead of an HTTP endpoint.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (documents.jsonl, queries.jsonl).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed documents with the frozen featurizer (store.bin, store.json).
    Ingest {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate queries, mine hard negatives and split the triples.
    Augment {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode from `<out>/train_triples.jsonl`.
    Train {
        #[arg(long)]
        mode: TrainMode,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate `<out>/head_<mode>.json` on labeled queries.
    Eval {
        #[arg(long)]
        mode: TrainMode,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine every metrics_<mode>.json in a directory into metrics.md.
    Compare {
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest, augment, then train and evaluate every configured mode.
    RunAll {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one corpus and evaluate on another.
    RunOod {
        /// Directory with documents.jsonl and queries.jsonl to train on.
        #[arg(long)]
        source: PathBuf,
        /// Directory with documents.jsonl and queries.jsonl to evaluate on.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.render().to_string();
            let msg = msg
                .strip_prefix("error: ")
                .unwrap_or(&msg)
                .trim_end()
                .to_owned();
            return Err(CliError::usage(anyhow::anyhow!(msg)));
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage(anyhow::anyhow!(
                "--threads must be positive"
            )));
        }
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::debug!("thread pool already initialized; --threads ignored");
        }
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides, cli.offline)
        .map_err(CliError::usage)?;
    execute(&cfg, cli.command)
}

pub fn execute(cfg: &PipelineConfig, command: Command) -> Result<(), CliError> {
    use pipeline::*;
    if matches!(
        command,
        Command::Augment { .. } | Command::RunAll { .. } | Command::RunOod { .. }
    ) {
        cfg.require_generator().map_err(CliError::usage)?;
    }
    match command {
        Command::Synth { out } => synth(cfg, &out).map_err(CliError::runtime),
        Command::Ingest { docs, out } => ingest(cfg, &docs, &out).map_err(CliError::runtime),
        Command::Augment { docs, out } => augment(cfg, &docs, &out),
        Command::Train { mode, docs, out } => {
            train_mode(cfg, &docs, &out, mode).map_err(CliError::runtime)
        }
        Command::Eval {
            mode,
            docs,
            queries,
            out,
        } => {
            let report = eval_mode(cfg, &docs, &queries, &out, mode)?;
            print!(
                "{}",
                refine_core::evaluator::render_markdown(&[report], &cfg.eval.ks)
            );
            Ok(())
        }
        Command::Compare { out } => {
            let reports = compare(cfg, &out).map_err(CliError::runtime)?;
            print!(
                "{}",
                refine_core::evaluator::render_markdown(&reports, &cfg.eval.ks)
            );
            Ok(())
        }
        Command::RunAll { docs, queries, out } => {
            run_all(cfg, &docs, &queries, &out)?;
            let md = std::fs::read_to_string(out.join("metrics.md"))
                .map_err(|e| CliError::runtime(e.into()))?;
            print!("{md}");
            Ok(())
        }
        Command::RunOod {
            source,
            target,
            out,
        } => {
            run_ood(cfg, &source, &target, &out)?;
            let md = std::fs::read_to_string(out.join("ood_report.md"))
                .map_err(|e| CliError::runtime(e.into()))?;
            print!("{md}");
            Ok(())
        }
    }
}
