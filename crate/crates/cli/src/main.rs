//! `haunt` — audits what language models claim to remember.
//!
//! The pipeline has models write two truths and two lies about each corpus
//! item, cross-verify every statement blind, then face their own lies (or a
//! planted nonexistent reference) in conversation. A judge model grades the
//! dialogue replies; analytics and reports come out the other end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use haunt_core::Result;

mod commands;
mod config;

use commands::App;
use config::{Overrides, Settings};

#[derive(Parser)]
#[command(
    name = "haunt",
    version,
    about = "Self-generated truth/lie audits for language models",
    long_about = "Runs a three-stage memory audit: models author two truths and two lies \
                  about each corpus item, every model verifies every statement blind, and \
                  each model is then nudged in conversation with its own lies (or with a \
                  planted reference that does not exist). A judge model grades the replies; \
                  stats and report bundles summarize the damage."
)]
struct Cli {
    #[command(flatten)]
    flags: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalFlags {
    /// Run config file (default: ./haunt.toml when present).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run identifier; records and reports live under <out>/<run-id>.
    #[arg(long, global = true, value_name = "ID")]
    run_id: Option<String>,
    /// Corpus CSV listing the audited items.
    #[arg(long, global = true, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Model roster TOML.
    #[arg(long, global = true, value_name = "FILE")]
    models: Option<PathBuf>,
    /// Judge model key (must appear in the roster).
    #[arg(long, global = true, value_name = "KEY")]
    judge: Option<String>,
    /// Maximum provider calls in flight.
    #[arg(long, global = true, value_name = "N")]
    concurrency: Option<usize>,
    /// Scripted-response file; replaces live providers for mock models.
    #[arg(long, global = true, value_name = "FILE")]
    mock_script: Option<PathBuf>,
    /// Output root for run stores (default: runs).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Render and digest this stage's prompts without any provider calls.
    #[arg(long, global = true)]
    dry_run: bool,
}

impl GlobalFlags {
    fn into_overrides(self) -> Overrides {
        Overrides {
            config: self.config,
            run_id: self.run_id,
            corpus: self.corpus,
            models: self.models,
            judge: self.judge,
            concurrency: self.concurrency,
            mock_script: self.mock_script,
            out: self.out,
            dry_run: self.dry_run,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the corpus file parses and its reference texts load.
    CorpusValidate,
    /// Stage 1: every audited model writes two truths and two lies per item.
    Generate,
    /// Stage 2: every audited model verifies every model's statements blind.
    Verify,
    /// Stage 3: each model faces its own two lies in conversation.
    Nudge,
    /// Press each model about a nonexistent concept reference in each item.
    Refnudge {
        /// Concept to plant (e.g. "dinosaur").
        #[arg(long, value_name = "WORD")]
        concept: Option<String>,
    },
    /// Grade recorded lie-nudge replies with the judge model.
    Judge,
    /// Score the judge against human labels.
    Calibrate {
        /// Human label CSV (record_id, stage_index, label).
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
    },
    /// Scan corpus reference texts for concept keywords (ground truth).
    KeywordTruth {
        /// Keyword spec TOML.
        #[arg(long, value_name = "FILE")]
        keywords: Option<PathBuf>,
    },
    /// Compute run metrics; writes stats.json and prints it.
    Stats,
    /// Emit the markdown + CSV report bundle with a content manifest.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error[io]: failed to start async runtime: {e}");
            return ExitCode::from(exit_code("io"));
        }
    };
    match runtime.block_on(dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let class = err.class();
            eprintln!("error[{class}]: {err}");
            ExitCode::from(exit_code(class))
        }
    }
}

async fn dispatch(cli: Cli) -> Result<()> {
    let settings = Settings::resolve(cli.flags.into_overrides())?;
    match cli.command {
        Command::CorpusValidate => commands::corpus_validate(&settings),
        Command::Generate => commands::generate(&App::open(settings)?).await,
        Command::Verify => commands::verify(&App::open(settings)?).await,
        Command::Nudge => commands::nudge(&App::open(settings)?).await,
        Command::Refnudge { concept } => commands::refnudge(&App::open(settings)?, concept).await,
        Command::Judge => commands::judge(&App::open(settings)?).await,
        Command::Calibrate { labels } => commands::calibrate_judge(&App::open(settings)?, labels),
        Command::KeywordTruth { keywords } => {
            commands::keyword_truth(&App::open(settings)?, keywords)
        }
        Command::Stats => commands::stats(&App::open(settings)?),
        Command::Report => commands::report(&App::open(settings)?),
    }
}

/// Stable exit codes per error class, so scripts can branch on failures
/// without parsing stderr.
fn exit_code(class: &str) -> u8 {
    match class {
        "config" => 2,
        "corpus" => 3,
        "template" => 4,
        "auth" => 5,
        "provider" | "request" => 6,
        "mock" => 7,
        "store" => 8,
        "parse" => 9,
        "provenance" => 10,
        "dependency" => 11,
        "labels" => 12,
        "ground-truth" => 13,
        "analytics" => 14,
        "io" => 15,
        "serialization" => 16,
        "interrupted" => 130,
        _ => 1,
    }
}
