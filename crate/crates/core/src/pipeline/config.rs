//! Run configuration: a TOML file with one table per stage, overridable from
//! the environment.
//!
//! `COHORTLENS_<SECTION>_<KEY>=value` sets `key` in `[section]`, e.g.
//! `COHORTLENS_DATASET_MIN_VALID_UPLOADS=5`. Variables without a known
//! section prefix set top-level keys (`COHORTLENS_SEED=7`). Values are parsed
//! as TOML and fall back to plain strings.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cohort::{DatasetConfig, Group};
use crate::glmm::GlmmSpec;
use crate::matching::{HttpScorerConfig, RefineConfig};
use crate::regression::{ControlSelector, LassoConfig, StepwiseConfig};
use crate::stats::Baseline;
use crate::synth::SynthSpec;
use crate::transcript::RuleConfig;

pub const ENV_PREFIX: &str = "COHORTLENS_";

const SECTIONS: [&str; 10] =
    ["paths", "dataset", "transcript", "selection", "glmm", "temporal", "matching", "robustness", "simulate", "fdr"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Input dataset directory; defaults to `<out>/input`, where `simulate`
    /// writes.
    pub data_dir: Option<PathBuf>,
    /// Optional per-upload transcript statistics.
    pub transcripts: Option<PathBuf>,
    /// Optional candidate pool for matching; defaults to the matched-control
    /// channels of the dataset.
    pub match_pool: Option<PathBuf>,
    /// Optional `topic_id,text` documents for word-score plot data.
    pub topic_documents: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Skip selection and use these topics.
    pub topics: Option<Vec<u32>>,
    pub selectors: Vec<ControlSelector>,
    pub stepwise: StepwiseConfig,
    pub lasso_folds: usize,
    pub lasso: LassoConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            topics: None,
            selectors: ControlSelector::ALL.to_vec(),
            stepwise: StepwiseConfig::default(),
            lasso_folds: 10,
            lasso: LassoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub baseline: Baseline,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub k: usize,
    pub caliper: Option<f64>,
    pub scorer: ScorerKind,
    pub refine: RefineConfig,
    pub http: HttpScorerConfig,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            k: 8,
            caliper: None,
            scorer: ScorerKind::Stub,
            refine: RefineConfig::default(),
            http: HttpScorerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Calendar date for the external-event realignment; `None` skips it.
    pub fixed_date: Option<NaiveDate>,
    /// Channels left out in the sensitivity refit; empty skips it.
    pub exclude: Vec<String>,
    pub gap_groups: Vec<Group>,
    pub engagement: bool,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            fixed_date: NaiveDate::from_ymd_opt(2020, 3, 1),
            exclude: vec![],
            gap_groups: vec![Group::AttemptedDuring, Group::ControlMajorLifeEvent],
            engagement: true,
        }
    }
}

/// FDR levels per analysis family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdrConfig {
    pub temporal: f64,
    pub glmm: f64,
    pub robustness: f64,
}

impl Default for FdrConfig {
    fn default() -> Self {
        FdrConfig { temporal: 0.05, glmm: 0.05, robustness: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness: simulation and cross-validation folds.
    pub seed: u64,
    /// Stages run concurrently by `run` after topic selection.
    pub max_parallel: usize,
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub transcript: RuleConfig,
    pub selection: SelectionConfig,
    pub glmm: GlmmSpec,
    pub temporal: TemporalConfig,
    pub matching: MatchingConfig,
    pub robustness: RobustnessConfig,
    /// The simulation's own seed is replaced by `seed`.
    pub simulate: SynthSpec,
    pub fdr: FdrConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            max_parallel: 1,
            paths: PathsConfig::default(),
            dataset: DatasetConfig::default(),
            transcript: RuleConfig::default(),
            selection: SelectionConfig::default(),
            glmm: GlmmSpec::default(),
            temporal: TemporalConfig::default(),
            matching: MatchingConfig::default(),
            robustness: RobustnessConfig::default(),
            simulate: SynthSpec::default(),
            fdr: FdrConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, then applies `overrides` as `(NAME, value)` pairs
    /// named like the environment variables.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        for (name, value) in overrides {
            apply_override(&mut table, name, value)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
    }

    /// Reads `path` (or the defaults when `None`) and applies `COHORTLENS_*`
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, PipelineError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?,
            None => String::new(),
        };
        let mut env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        Self::from_toml_with_overrides(&text, &env)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, name: &str, value: &str) -> Result<(), PipelineError> {
    let rest = name.strip_prefix(ENV_PREFIX).unwrap_or(name).to_ascii_lowercase();
    let value = parse_value(value);
    let section = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_")));
    match section {
        Some(s) => {
            let key = &rest[s.len() + 1..];
            let entry = table.entry(s.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sub) = entry else {
                return Err(PipelineError::Config(format!("`{s}` is not a table")));
            };
            sub.insert(key.to_string(), value);
        }
        None => {
            table.insert(rest, value);
        }
    }
    Ok(())
}
