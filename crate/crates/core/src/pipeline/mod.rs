//! End-to-end orchestration over an output directory.
//!
//! Each stage reads the files written by its prerequisites and writes its
//! own. A stage that finishes leaves a marker in `<out>/.stages/<stage>.json`
//! listing its outputs; under [`StageDeps::Strict`] a stage refuses to run
//! until every prerequisite marker and the files it lists are present.
//!
//! Output files carry no timestamps or absolute paths, so identical inputs,
//! config and seed give byte-identical outputs.

mod config;
pub mod output;
mod report;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LoadError;

pub use config::{
    FdrConfig, MatchingConfig, PathsConfig, RobustnessConfig, RunConfig, ScorerKind, SelectionConfig, TemporalConfig,
    ENV_PREFIX,
};
pub use stages::{AlignedRow, GlmmRow, SelectionReport, SelectorOutcome, TemporalRow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("loading dataset: {0}")]
    Load(#[from] LoadError),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("stage `{stage}` needs `{missing}` to run first")]
    MissingDependency { stage: Stage, missing: Stage },
    #[error("stage `{stage}`: {message}")]
    Analysis { stage: Stage, message: String },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn parse(path: &Path, e: impl fmt::Display) -> Self {
        PipelineError::Parse { path: path.to_path_buf(), message: e.to_string() }
    }

    pub(crate) fn analysis(stage: Stage, e: impl fmt::Display) -> Self {
        PipelineError::Analysis { stage, message: e.to_string() }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Load(_) => "load",
            PipelineError::Parse { .. } => "parse",
            PipelineError::MissingDependency { .. } => "dependency",
            PipelineError::Analysis { .. } => "analysis",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Validate,
    Filter,
    Align,
    SelectTopics,
    FitGlmm,
    TemporalTest,
    Match,
    Robustness,
    Report,
}

impl Stage {
    /// Stages run by `run`, in order.
    pub const PIPELINE: [Stage; 9] = [
        Stage::Validate,
        Stage::Filter,
        Stage::Align,
        Stage::SelectTopics,
        Stage::FitGlmm,
        Stage::TemporalTest,
        Stage::Match,
        Stage::Robustness,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Validate => "validate",
            Stage::Filter => "filter",
            Stage::Align => "align",
            Stage::SelectTopics => "select-topics",
            Stage::FitGlmm => "fit-glmm",
            Stage::TemporalTest => "temporal-test",
            Stage::Match => "match",
            Stage::Robustness => "robustness",
            Stage::Report => "report",
        }
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Simulate | Stage::Validate => &[],
            Stage::Filter => &[Stage::Validate],
            Stage::Align | Stage::Match => &[Stage::Filter],
            Stage::SelectTopics => &[Stage::Align],
            Stage::FitGlmm | Stage::TemporalTest => &[Stage::Align, Stage::SelectTopics],
            Stage::Robustness => &[Stage::Filter, Stage::SelectTopics],
            Stage::Report => &[Stage::Validate, Stage::Filter, Stage::Align, Stage::SelectTopics],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Stage::Simulate]
            .into_iter()
            .chain(Stage::PIPELINE)
            .find(|st| st.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageDeps {
    /// Refuse to run a stage before its prerequisites.
    #[default]
    Strict,
    /// Run anyway; missing inputs surface as I/O errors.
    Force,
}

impl FromStr for StageDeps {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(StageDeps::Strict),
            "force" => Ok(StageDeps::Force),
            _ => Err(PipelineError::Config(format!("--stage-deps must be strict or force, got `{s}`"))),
        }
    }
}

/// Contents of a stage marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    pub deps: StageDeps,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>, deps: StageDeps) -> Self {
        Pipeline { config, out: out.into(), deps }
    }

    /// Directory the dataset is read from.
    pub fn data_dir(&self) -> PathBuf {
        self.config.paths.data_dir.clone().unwrap_or_else(|| self.out.join("input"))
    }

    pub(crate) fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn marker_path(&self, stage: Stage) -> PathBuf {
        self.out.join(".stages").join(format!("{stage}.json"))
    }

    pub fn marker(&self, stage: Stage) -> Option<StageMarker> {
        output::read_json(&self.marker_path(stage)).ok()
    }

    /// Whether `stage` has completed and its outputs are still present.
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.marker(stage).is_some_and(|m| m.outputs.iter().all(|o| self.out.join(o).exists()))
    }

    fn check_dependencies(&self, stage: Stage) -> Result<(), PipelineError> {
        if self.deps == StageDeps::Force {
            return Ok(());
        }
        match stage.dependencies().iter().find(|d| !self.is_complete(**d)) {
            Some(&missing) => Err(PipelineError::MissingDependency { stage, missing }),
            None => Ok(()),
        }
    }

    /// Runs one stage and records its marker.
    pub fn run(&self, stage: Stage) -> Result<StageMarker, PipelineError> {
        self.check_dependencies(stage)?;
        log::info!("running stage {stage}");
        let outputs = stages::execute(self, stage)?;
        let marker = StageMarker { stage, outputs };
        output::write_json(&self.marker_path(stage), &marker)?;
        Ok(marker)
    }

    /// Runs every analysis stage in order. The four stages after topic
    /// selection are independent and run up to `max_parallel` at a time.
    pub fn run_all(&self) -> Result<Vec<StageMarker>, PipelineError> {
        let mut markers = Vec::new();
        for stage in &Stage::PIPELINE[..4] {
            markers.push(self.run(*stage)?);
        }
        let middle = &Stage::PIPELINE[4..8];
        for chunk in middle.chunks(self.config.max_parallel.max(1)) {
            let results: Vec<Result<StageMarker, PipelineError>> = if chunk.len() == 1 {
                vec![self.run(chunk[0])]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = chunk.iter().map(|&st| s.spawn(move || self.run(st))).collect();
                    handles.into_iter().map(|h| h.join().expect("stage thread panicked")).collect()
                })
            };
            for r in results {
                markers.push(r?);
            }
        }
        markers.push(self.run(Stage::Report)?);
        Ok(markers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Simulate].into_iter().chain(Stage::PIPELINE) {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("fit".parse::<Stage>().is_err());
    }

    #[test]
    fn dependencies_precede_dependents() {
        let order: Vec<Stage> = Stage::PIPELINE.to_vec();
        for (i, s) in order.iter().enumerate() {
            for d in s.dependencies() {
                assert!(order[..i].contains(d), "{s} depends on later {d}");
            }
        }
    }

    #[test]
    fn strict_mode_reports_the_first_missing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(RunConfig::default(), dir.path(), StageDeps::Strict);
        let err = p.run(Stage::FitGlmm).unwrap_err();
        assert_eq!(err.kind(), "dependency");
        assert!(matches!(err, PipelineError::MissingDependency { missing: Stage::Align, .. }));
    }
}
