// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `moelens` command line: `gen-corpus`, `train`, `analyze`, `prune`.
//!
//! Human-readable progress goes to standard error; standard output carries
//! one JSON document per command. Exit codes: 0 success, 2 usage or input
//! error, 3 numerical failure, 4 consistency failure.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;

pub use commands::{analyze, gen_corpus, prune, trace_chunks, train, AnalyzeSummary};
pub use config::{AnalysisConfig, CorpusConfig, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CONSISTENCY: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "moelens",
    version,
    about = "Instrumented mixture-of-experts transformer and routing analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one `<domain>.bytes` file per configured domain.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from the seeded initialization and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Specialization, lens grids, similarity and perplexity reports.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop experts whose domain share falls below the threshold.
    Prune {
        #[arg(long)]
        model: PathBuf,
        /// Specialization CSV written by `analyze`.
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Plan for this domain only; default keeps every domain's experts.
        #[arg(long)]
        domain: Option<String>,
        /// Also mask removed experts before the router softmax.
        #[arg(long)]
        renormalize: bool,
    },
}

/// Exit code for an error, per the contract in the module docs.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_NUMERIC,
        Error::Consistency(_) | Error::Dimension { .. } => EXIT_CONSISTENCY,
        _ => EXIT_INPUT,
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenCorpus { config, out } => {
            RunConfig::load(&config).and_then(|c| gen_corpus(&c, &out))
        }
        Command::Train { config, out, steps } => RunConfig::load(&config).and_then(|mut c| {
            if let Some(s) = steps {
                c.train.steps = s;
            }
            train(&c, &out)
        }),
        Command::Analyze { model, config, out } => {
            RunConfig::load(&config).and_then(|c| analyze(&c, &model, &out))
        }
        Command::Prune {
            model,
            table,
            threshold,
            out,
            domain,
            renormalize,
        } => prune(
            &model,
            &table,
            threshold,
            domain.as_deref(),
            renormalize,
            &out,
        ),
    };
    match result {
        Ok(json) => {
            println!("{json}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
