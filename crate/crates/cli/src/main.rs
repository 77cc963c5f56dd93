//! `cohortlens` command-line driver.
//!
//! Every subcommand runs one pipeline stage (or `run` for all of them) over
//! `--out`. On failure a JSON object `{"error": {"kind", "message"}}` goes to
//! stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use cohortlens::pipeline::{Pipeline, PipelineError, RunConfig, Stage, StageDeps};

#[derive(Parser, Debug)]
#[command(name = "cohortlens", version, about = "Longitudinal cohort analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; COHORTLENS_<SECTION>_<KEY> variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Deps::Strict)]
    stage_deps: Deps,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Deps {
    Strict,
    Force,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Check the input tables and record violations.
    Validate,
    /// Apply transcript rules and drop channels with too few valid uploads.
    Filter,
    /// Align topic series around reference events.
    Align,
    /// Stepwise and LASSO topic selection on pre-event means.
    SelectTopics,
    /// Beta mixed-model battery over the selected topics.
    FitGlmm,
    /// Within- and between-group per-bin tests.
    TemporalTest,
    /// Propensity matching with scorer refinement.
    Match,
    /// Calendar realignment, engagement, posting gaps and exclusion refits.
    Robustness,
    /// Write a synthetic cohort with known effects as the input dataset.
    Simulate,
    /// Collate stage outputs into report.md and plot data.
    Report,
    /// Every stage from validate through report.
    Run,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Validate => Stage::Validate,
            Command::Filter => Stage::Filter,
            Command::Align => Stage::Align,
            Command::SelectTopics => Stage::SelectTopics,
            Command::FitGlmm => Stage::FitGlmm,
            Command::TemporalTest => Stage::TemporalTest,
            Command::Match => Stage::Match,
            Command::Robustness => Stage::Robustness,
            Command::Simulate => Stage::Simulate,
            Command::Report => Stage::Report,
            Command::Run | Command::ShowConfig => return None,
        })
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let deps = match cli.stage_deps {
        Deps::Strict => StageDeps::Strict,
        Deps::Force => StageDeps::Force,
    };
    let pipeline = Pipeline::new(config, &cli.out, deps);
    let markers = match cli.command.stage() {
        Some(stage) => vec![pipeline.run(stage).with_context(|| format!("stage {stage}"))?],
        None => pipeline.run_all()?,
    };
    for m in markers {
        println!("{}: {}", m.stage, m.outputs.join(", "));
    }
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err.chain().find_map(|e| e.downcast_ref::<PipelineError>()).map_or("internal", |e| e.kind());
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    serde_json::json!({ "error": { "kind": kind, "message": message } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
