//! `utirisk`: staged batch pipeline from raw event files to explained
//! pairwise risk models.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 missing or
//! stale upstream stage output, 4 input/data error, 5 configuration error.

mod failure;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use failure::Failure;
use stages::Run;

#[derive(Parser)]
#[command(name = "utirisk", version, about = "UTI likelihood scoring, cohort building and pairwise risk models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; all cores by default. Output does not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic cohort in the ingest formats to <out>/data.
    Generate,
    /// Parse and validate the five input files into <out>/ingest.
    Ingest,
    /// Score every patient-day and extract likelihood episodes.
    Score,
    /// Select index events, sample controls, apply exclusions, extract features.
    Cohort,
    /// Train the six pairwise models.
    Train,
    /// TreeSHAP attributions and importance summaries for each model's test rows.
    Explain,
    /// Metrics, ROC points and the cohort summary table.
    Report,
    /// All stages in order.
    Pipeline,
}

impl Command {
    fn stage(self) -> Option<&'static str> {
        Some(match self {
            Command::Generate => "generate",
            Command::Ingest => "ingest",
            Command::Score => "score",
            Command::Cohort => "cohort",
            Command::Train => "train",
            Command::Explain => "explain",
            Command::Report => "report",
            Command::Pipeline => return None,
        })
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(n))
            .build_global()
            .map_err(|e| Failure::Other(format!("thread pool: {e}")))?;
    }
    let config = stages::load_config(cli.config.as_deref(), cli.seed)?;
    let run = Run::new(config, cli.out.clone())?;
    match cli.command.stage() {
        Some(stage) => stages::run_stage(&run, stage).map(|_| ()),
        None => stages::pipeline(&run).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
