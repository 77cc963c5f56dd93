//! Stage bodies. Each returns the files it wrote, relative to the output
//! directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::output::{read_csv, read_json, replace_dir, write_csv, write_json};
use super::{report, Pipeline, PipelineError, ScorerKind, Stage};
use crate::cohort::{
    filter_channels, load_dataset, validate_dataset, write_dataset, CohortDataset, DatasetPaths, Exclusion,
    ExclusionReport, Group, ValidationLevel, Violation, ViolationCode,
};
use crate::glmm::{odds_change_percent, run_topic_battery, TermKind};
use crate::matching::{
    balance_report, estimate_propensity, knn_match, refine_matches, BalanceRow, HttpScorer, MatchFeatures,
    MatchScorer, MatchingError, StubScorer,
};
use crate::regression::{
    build_pre_event_design, cv_lasso, stepwise_select, ControlSelector, SelectionTrace,
};
use crate::robustness::{
    activity_gap_analysis, engagement_comparison, external_event_analysis, sensitivity_refit, RobustnessReport,
    SensitivityOptions,
};
use crate::stats::{between_battery, jaccard, within_battery, TestKind, TestResult};
use crate::synth::{generate_cohort, SynthSpec};
use crate::temporal::{
    aggregate_group, align_dataset, assign_reference_events, AlignedSeries, Alignment, EventPolicy, PrePostMeans,
    BINS_PER_SIDE,
};
use crate::transcript::{classify_transcript, TranscriptStats};

pub(crate) const VALIDATION: &str = "validation.json";
pub(crate) const FILTERED: &str = "filtered";
pub(crate) const EXCLUSIONS: &str = "exclusions.json";
pub(crate) const ALIGNED: &str = "aligned.csv";
pub(crate) const GROUP_CURVES: &str = "group_curves.csv";
pub(crate) const PRE_POST: &str = "pre_post_means.csv";
pub(crate) const ALIGN_SKIPPED: &str = "alignment_skipped.csv";
pub(crate) const SELECTION: &str = "selection_report.json";
pub(crate) const LASSO_PATH: &str = "lasso_path.csv";
pub(crate) const GLMM_RESULTS: &str = "glmm_results.csv";
pub(crate) const MODEL_META: &str = "model_meta.json";
pub(crate) const TEMPORAL: &str = "temporal_tests.csv";
pub(crate) const MATCHES: &str = "matches.csv";
pub(crate) const BALANCE: &str = "balance.csv";
pub(crate) const SCORER_CALLS: &str = "scorer_calls.json";
pub(crate) const ROBUSTNESS: &str = "robustness_report.json";
pub(crate) const BOX_STATS: &str = "box_stats.csv";
pub(crate) const GROUND_TRUTH: &str = "ground_truth.json";

pub(super) fn execute(p: &Pipeline, stage: Stage) -> Result<Vec<String>, PipelineError> {
    match stage {
        Stage::Simulate => simulate(p),
        Stage::Validate => validate(p),
        Stage::Filter => filter(p),
        Stage::Align => align(p),
        Stage::SelectTopics => select_topics(p),
        Stage::FitGlmm => fit_glmm(p),
        Stage::TemporalTest => temporal_test(p),
        Stage::Match => match_stage(p),
        Stage::Robustness => robustness(p),
        Stage::Report => report::build(p),
    }
}

fn names(files: &[&str]) -> Vec<String> {
    files.iter().map(|s| s.to_string()).collect()
}

fn load_input(p: &Pipeline) -> Result<CohortDataset, PipelineError> {
    Ok(load_dataset(&DatasetPaths::in_dir(&p.data_dir()), &p.config.dataset)?)
}

pub(crate) fn load_filtered(p: &Pipeline) -> Result<CohortDataset, PipelineError> {
    Ok(load_dataset(&DatasetPaths::in_dir(&p.path(FILTERED)), &p.config.dataset)?)
}

fn write_dataset_dir(dir: &Path, ds: &CohortDataset) -> Result<(), PipelineError> {
    replace_dir(dir, |tmp| write_dataset(ds, tmp).map(|_| ()))
}

pub(crate) fn selected_topics(p: &Pipeline) -> Result<Vec<u32>, PipelineError> {
    Ok(read_json::<SelectionReport>(&p.path(SELECTION))?.selected_topics)
}

fn simulate(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let spec = SynthSpec { seed: p.config.seed, ..p.config.simulate.clone() };
    let (ds, truth) = generate_cohort(&spec).map_err(|e| PipelineError::analysis(Stage::Simulate, e))?;
    let dir = p.data_dir();
    write_dataset_dir(&dir, &ds)?;
    write_json(&p.path(GROUND_TRUTH), &truth)?;
    let mut out = names(&[GROUND_TRUTH]);
    if let Ok(rel) = dir.strip_prefix(&p.out) {
        out.push(rel.to_string_lossy().into_owned());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub channels: usize,
    pub uploads: usize,
    pub topics: usize,
    pub channels_per_group: BTreeMap<Group, usize>,
    pub violation_counts: BTreeMap<ViolationCode, usize>,
    pub violations: Vec<Violation>,
}

fn validate(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let ds = load_input(p)?;
    let violations = validate_dataset(&ds, ValidationLevel::Load);
    let mut violation_counts = BTreeMap::new();
    for v in &violations {
        *violation_counts.entry(v.code).or_insert(0) += 1;
    }
    if !violations.is_empty() {
        log::warn!("{} validation violations", violations.len());
    }
    let summary = ValidationSummary {
        channels: ds.channels().len(),
        uploads: ds.uploads().len(),
        topics: ds.topics().len(),
        channels_per_group: Group::ALL.iter().map(|&g| (g, ds.channels_in(g).count())).collect(),
        violation_counts,
        violations,
    };
    write_json(&p.path(VALIDATION), &summary)?;
    Ok(names(&[VALIDATION]))
}

#[derive(Debug, Deserialize)]
struct TranscriptRow {
    upload_id: String,
    sentence_count: u32,
    audio_seconds: f64,
    repeated_fraction: f64,
    non_english_fraction: f64,
    speaker_count: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub classified: usize,
    pub invalid: usize,
    /// Rows naming uploads absent from the dataset.
    pub unknown_uploads: usize,
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub transcripts: Option<TranscriptSummary>,
    pub channels: ExclusionReport,
}

fn apply_transcripts(p: &Pipeline, ds: CohortDataset, path: &Path) -> Result<(CohortDataset, TranscriptSummary), PipelineError> {
    let rows: Vec<TranscriptRow> = read_csv(path)?;
    let current: HashMap<&str, bool> = ds.uploads().iter().map(|u| (u.upload_id.as_str(), u.valid)).collect();
    let mut summary = TranscriptSummary::default();
    let mut flags = HashMap::new();
    for r in rows {
        let Some(&was_valid) = current.get(r.upload_id.as_str()) else {
            summary.unknown_uploads += 1;
            continue;
        };
        let stats = TranscriptStats {
            sentence_count: r.sentence_count,
            audio_seconds: r.audio_seconds,
            repeated_fraction: r.repeated_fraction,
            non_english_fraction: r.non_english_fraction,
            speaker_count: r.speaker_count,
        };
        let verdict = classify_transcript(&stats, &p.config.transcript);
        summary.classified += 1;
        if !verdict.valid {
            summary.invalid += 1;
        }
        for reason in verdict.reasons {
            *summary.reasons.entry(reason.as_str().to_string()).or_insert(0) += 1;
        }
        flags.insert(r.upload_id, was_valid && verdict.valid);
    }
    Ok((ds.with_validity(&flags), summary))
}

fn filter(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let mut ds = load_input(p)?;
    let mut transcripts = None;
    if let Some(path) = &p.config.paths.transcripts {
        let (updated, summary) = apply_transcripts(p, ds, path)?;
        ds = updated;
        transcripts = Some(summary);
    }
    let flagged: Vec<Exclusion> = ds
        .channels()
        .iter()
        .filter(|c| c.excluded_flag)
        .map(|c| Exclusion {
            channel_id: c.channel_id.clone(),
            group: c.group,
            reason: "flagged_in_input".to_string(),
            valid_uploads: ds.valid_upload_count(&c.channel_id),
        })
        .collect();
    let ds = ds.retain_channels(|c| !c.excluded_flag);
    let (filtered, mut report) = filter_channels(&ds, p.config.dataset.min_valid_uploads)
        .map_err(|e| PipelineError::analysis(Stage::Filter, e))?;
    report.exclusions.splice(0..0, flagged);
    report.exclusions.sort_by(|a, b| a.channel_id.cmp(&b.channel_id));
    write_dataset_dir(&p.path(FILTERED), &filtered)?;
    write_json(&p.path(EXCLUSIONS), &FilterSummary { transcripts, channels: report })?;
    Ok(names(&[FILTERED, EXCLUSIONS]))
}

/// One bin of one aligned series; bin 0 holds the event-week anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedRow {
    pub channel_id: String,
    pub topic_id: u32,
    pub group: Group,
    pub bin_index: i32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub topic_id: u32,
    pub group: Group,
    pub bin_index: i32,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SkippedRow {
    channel_id: String,
    topic_id: Option<u32>,
    reason: String,
}

fn align(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let ds = load_filtered(p)?;
    let (ds, failures) = assign_reference_events(&ds, EventPolicy::Standard);
    let topics = ds.topic_ids();
    let alignment = align_dataset(&ds, &topics, p.config.dataset.window_weeks());

    let rows = alignment.series.iter().flat_map(|s| {
        (-(BINS_PER_SIDE as i32)..=BINS_PER_SIDE as i32).map(move |b| AlignedRow {
            channel_id: s.channel_id.clone(),
            topic_id: s.topic_id,
            group: s.group,
            bin_index: b,
            value: if b == 0 { s.anchor } else { s.bin(b) },
        })
    });
    write_csv(&p.path(ALIGNED), rows)?;

    let mut curves = Vec::new();
    for &t in &topics {
        for g in Group::ALL {
            if let Ok(bins) = aggregate_group(&alignment.for_topic(t, g)) {
                curves.extend(bins.into_iter().map(|b| CurveRow {
                    topic_id: t,
                    group: g,
                    bin_index: b.bin_index,
                    mean: b.mean,
                    se: b.se,
                    n: b.n,
                }));
            }
        }
    }
    write_csv(&p.path(GROUP_CURVES), curves)?;
    write_csv(&p.path(PRE_POST), crate::temporal::pre_post_table(&ds, &topics))?;

    let skipped = failures
        .iter()
        .map(|(c, e)| SkippedRow { channel_id: c.clone(), topic_id: None, reason: e.to_string() })
        .chain(alignment.skipped.iter().map(|(c, t, e)| SkippedRow {
            channel_id: c.clone(),
            topic_id: Some(*t),
            reason: e.to_string(),
        }));
    write_csv(&p.path(ALIGN_SKIPPED), skipped)?;
    Ok(names(&[ALIGNED, GROUP_CURVES, PRE_POST, ALIGN_SKIPPED]))
}

/// Rebuilds aligned series from `aligned.csv`, in file order.
pub(crate) fn read_alignment(path: &Path) -> Result<Alignment, PipelineError> {
    let rows: Vec<AlignedRow> = read_csv(path)?;
    let mut order: Vec<(String, u32)> = Vec::new();
    let mut series: HashMap<(String, u32), AlignedSeries> = HashMap::new();
    for r in rows {
        let key = (r.channel_id.clone(), r.topic_id);
        let s = series.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            AlignedSeries {
                channel_id: r.channel_id.clone(),
                topic_id: r.topic_id,
                group: r.group,
                pre: [f64::NAN; BINS_PER_SIDE],
                post: [f64::NAN; BINS_PER_SIDE],
                anchor: f64::NAN,
            }
        });
        let b = r.bin_index;
        match b {
            0 => s.anchor = r.value,
            b if b < 0 && b >= -(BINS_PER_SIDE as i32) => s.pre[(b + BINS_PER_SIDE as i32) as usize] = r.value,
            b if b > 0 && b <= BINS_PER_SIDE as i32 => s.post[(b - 1) as usize] = r.value,
            _ => return Err(PipelineError::parse(path, format!("bin index {b} out of range"))),
        }
    }
    let mut out = Alignment::default();
    for key in order {
        let s = series.remove(&key).expect("recorded key");
        if s.anchor.is_nan() || s.pre.iter().chain(&s.post).any(|v| v.is_nan()) {
            return Err(PipelineError::parse(path, format!("series {} topic {} is incomplete", key.0, key.1)));
        }
        out.series.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSummary {
    pub lambda_min: f64,
    pub lambda_1se: f64,
    pub support_min: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorOutcome {
    pub selector: ControlSelector,
    pub n_treated: usize,
    pub n_controls: usize,
    pub stepwise: Option<SelectionTrace>,
    pub lasso: Option<LassoSummary>,
    /// Jaccard similarity of the stepwise and LASSO feature sets.
    pub agreement: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidate_topics: Vec<u32>,
    /// Topics carried into the effect analyses.
    pub selected_topics: Vec<u32>,
    /// Set when the topics came from the config rather than selection.
    pub configured: bool,
    /// Set when no selector chose anything and every topic was kept.
    pub fallback_all: bool,
    pub selectors: Vec<SelectorOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LassoPathRow {
    selector: ControlSelector,
    lambda: f64,
    feature: String,
    coefficient: f64,
}

fn topic_of(feature: &str) -> Option<u32> {
    feature.strip_prefix("topic_")?.parse().ok()
}

fn select_topics(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let cfg = &p.config.selection;
    let ds = load_filtered(p)?;
    let candidates = ds.topic_ids();
    let means: Vec<PrePostMeans> = read_csv(&p.path(PRE_POST))?;
    let pre: BTreeMap<(String, u32), f64> =
        means.iter().filter_map(|m| m.mean_before.map(|v| ((m.channel_id.clone(), m.topic_id), v))).collect();

    let mut selectors = Vec::new();
    let mut path_rows = Vec::new();
    let mut union: BTreeSet<u32> = BTreeSet::new();
    if cfg.topics.is_none() {
        for &selector in &cfg.selectors {
            let outcome = run_selector(p, &ds, &pre, &candidates, selector, &mut path_rows);
            if let Some(trace) = &outcome.stepwise {
                union.extend(trace.final_features.iter().filter_map(|f| topic_of(f)));
            }
            selectors.push(outcome);
        }
    }
    let (selected, fallback_all) = match &cfg.topics {
        Some(t) => {
            if let Some(bad) = t.iter().find(|t| !candidates.contains(t)) {
                return Err(PipelineError::Config(format!("selection.topics names unknown topic {bad}")));
            }
            (t.clone(), false)
        }
        None if union.is_empty() => {
            log::warn!("no topic selected by any contrast; keeping all {}", candidates.len());
            (candidates.clone(), true)
        }
        None => (union.into_iter().collect(), false),
    };
    let report = SelectionReport {
        candidate_topics: candidates,
        selected_topics: selected,
        configured: cfg.topics.is_some(),
        fallback_all,
        selectors,
    };
    write_json(&p.path(SELECTION), &report)?;
    write_csv(&p.path(LASSO_PATH), path_rows)?;
    Ok(names(&[SELECTION, LASSO_PATH]))
}

fn run_selector(
    p: &Pipeline,
    ds: &CohortDataset,
    pre: &BTreeMap<(String, u32), f64>,
    topics: &[u32],
    selector: ControlSelector,
    path_rows: &mut Vec<LassoPathRow>,
) -> SelectorOutcome {
    let cfg = &p.config.selection;
    let mut out =
        SelectorOutcome { selector, n_treated: 0, n_controls: 0, stepwise: None, lasso: None, agreement: None, error: None };
    let design = match build_pre_event_design(ds, pre, topics, selector) {
        Ok(d) => d,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.n_treated = design.y.iter().filter(|&&v| v == 1.0).count();
    out.n_controls = design.n_rows() - out.n_treated;
    let mut errors: Vec<String> = Vec::new();
    match stepwise_select(&design, &cfg.stepwise) {
        Ok((trace, _)) => out.stepwise = Some(trace),
        Err(e) => errors.push(format!("stepwise: {e}")),
    }
    match cv_lasso(&design, cfg.lasso_folds, p.config.seed, &cfg.lasso) {
        Ok(cv) => {
            for s in &cv.path.solutions {
                for (name, &b) in cv.path.names.iter().zip(&s.coefficients) {
                    path_rows.push(LassoPathRow { selector, lambda: s.lambda, feature: name.clone(), coefficient: b });
                }
            }
            out.lasso = Some(LassoSummary { lambda_min: cv.lambda_min, lambda_1se: cv.lambda_1se, support_min: cv.support_min });
        }
        Err(e) => errors.push(format!("lasso: {e}")),
    }
    if let (Some(t), Some(l)) = (&out.stepwise, &out.lasso) {
        let a: BTreeSet<&String> = t.final_features.iter().collect();
        let b: BTreeSet<&String> = l.support_min.iter().collect();
        out.agreement = jaccard(&a, &b).ok();
    }
    if !errors.is_empty() {
        out.error = Some(errors.join("; "));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmRow {
    pub topic_id: u32,
    pub term: String,
    pub kind: TermKind,
    pub group: Option<Group>,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub p_adjusted: Option<f64>,
    pub odds_ratio: f64,
    pub odds_change_percent: f64,
    pub estimate_original: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModelMeta {
    pub topic_id: u32,
    pub error: Option<String>,
    pub sigma2: Option<f64>,
    pub phi: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub converged: Option<bool>,
    pub boundary: Option<bool>,
    pub iterations: Option<usize>,
    pub grad_norm: Option<f64>,
    pub n_obs: Option<usize>,
    pub n_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub reference_group: Group,
    pub quadrature_order: usize,
    pub include_covariates: bool,
    pub q: f64,
    pub topics: Vec<TopicModelMeta>,
}

fn fit_glmm(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let ds = load_filtered(p)?;
    let means: Vec<PrePostMeans> = read_csv(&p.path(PRE_POST))?;
    let topics = selected_topics(p)?;
    let spec = &p.config.glmm;
    let battery = run_topic_battery(&ds, &topics, &means, spec, p.config.fdr.glmm);
    let rows = battery.fits().flat_map(|f| {
        f.terms.iter().map(move |t| GlmmRow {
            topic_id: f.topic_id,
            term: t.name.clone(),
            kind: t.kind,
            group: t.group,
            estimate: t.estimate,
            std_error: t.std_error,
            z: t.z,
            p_value: t.p_value,
            p_adjusted: t.p_adjusted,
            odds_ratio: t.odds_ratio,
            odds_change_percent: odds_change_percent(t.estimate),
            estimate_original: t.estimate_original,
        })
    });
    write_csv(&p.path(GLMM_RESULTS), rows)?;
    let meta = ModelMeta {
        reference_group: spec.reference_group,
        quadrature_order: spec.quadrature_order,
        include_covariates: spec.include_covariates,
        q: p.config.fdr.glmm,
        topics: battery
            .entries
            .iter()
            .map(|e| {
                let f = e.fit.as_ref();
                TopicModelMeta {
                    topic_id: e.topic_id,
                    error: e.error.clone(),
                    sigma2: f.map(|f| f.sigma2),
                    phi: f.map(|f| f.phi),
                    log_likelihood: f.map(|f| f.log_likelihood),
                    converged: f.map(|f| f.converged),
                    boundary: f.map(|f| f.boundary),
                    iterations: f.map(|f| f.iterations),
                    grad_norm: f.map(|f| f.grad_norm),
                    n_obs: f.map(|f| f.n_obs),
                    n_channels: f.map(|f| f.n_channels),
                }
            })
            .collect(),
    };
    write_json(&p.path(MODEL_META), &meta)?;
    Ok(names(&[GLMM_RESULTS, MODEL_META]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Within,
    Between,
}

/// One cell of a temporal battery. Statistics are empty when the cell was
/// degenerate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRow {
    pub family: Family,
    pub topic_id: u32,
    pub group: Group,
    pub bin_index: i32,
    pub test: Option<TestKind>,
    pub statistic: Option<f64>,
    pub df: Option<f64>,
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub rejected: bool,
}

fn temporal_row(family: Family, topic_id: u32, group: Group, bin_index: i32, r: Option<&TestResult>, rejected: bool) -> TemporalRow {
    TemporalRow {
        family,
        topic_id,
        group,
        bin_index,
        test: r.map(|r| r.kind),
        statistic: r.map(|r| r.statistic),
        df: r.map(|r| r.df),
        p_value: r.map(|r| r.p_value),
        p_adjusted: r.and_then(|r| r.p_adjusted),
        rejected,
    }
}

fn temporal_test(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let alignment = read_alignment(&p.path(ALIGNED))?;
    let topics = selected_topics(p)?;
    let q = p.config.fdr.temporal;
    let mut rows = Vec::new();
    for t in within_battery(&alignment, &topics, p.config.temporal.baseline, q) {
        rows.extend(t.cells.iter().map(|c| temporal_row(Family::Within, t.topic_id, t.group, c.bin_index, c.result.as_ref(), c.rejected)));
    }
    for t in between_battery(&alignment, &topics, q) {
        rows.extend(t.cells.iter().map(|c| temporal_row(Family::Between, t.topic_id, c.group, c.bin_index, c.result.as_ref(), c.rejected)));
    }
    write_csv(&p.path(TEMPORAL), rows)?;
    Ok(names(&[TEMPORAL]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub treatment_id: String,
    pub control_id: String,
    pub propensity_treatment: f64,
    pub propensity_control: f64,
    pub distance: f64,
    pub knn_rank: usize,
    pub refinement_score: Option<u8>,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub scorer: ScorerKind,
    pub features: Vec<String>,
    pub penalized_fallback: bool,
    pub n_treated: usize,
    pub n_pool: usize,
    pub n_retained: usize,
    pub short: Vec<String>,
    pub unmatched: Vec<String>,
    pub balance_error: Option<String>,
    pub calls: Vec<crate::matching::ScorerCall>,
}

fn match_stage(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let cfg = &p.config.matching;
    let fail = |e: MatchingError| PipelineError::analysis(Stage::Match, e);
    let ds = load_filtered(p)?;
    let features_of = |g: Group| -> Vec<MatchFeatures> {
        ds.channels_in(g).filter_map(|c| MatchFeatures::from_dataset(&ds, &c.channel_id)).collect()
    };
    let treated = features_of(Group::AttemptedDuring);
    let pool: Vec<MatchFeatures> = match &p.config.paths.match_pool {
        Some(path) => read_json(path)?,
        None => features_of(Group::ControlMatches),
    };
    let propensity = estimate_propensity(&treated, &pool).map_err(fail)?;
    let ids = |f: &[MatchFeatures]| f.iter().map(|f| f.channel_id.clone()).collect::<Vec<_>>();
    let candidates = knn_match(&ids(&treated), &ids(&pool), &propensity.scores, cfg.k, cfg.caliper).map_err(fail)?;
    let lookup: BTreeMap<String, MatchFeatures> =
        treated.iter().chain(&pool).map(|f| (f.channel_id.clone(), f.clone())).collect();
    let scorer: Box<dyn MatchScorer> = match cfg.scorer {
        ScorerKind::Stub => Box::new(StubScorer),
        ScorerKind::Http => Box::new(HttpScorer::new(cfg.http.clone())),
    };
    let refined = refine_matches(&candidates, &lookup, scorer.as_ref(), &cfg.refine);
    let (balance, balance_error): (Vec<BalanceRow>, Option<String>) = match balance_report(&treated, &pool, &refined) {
        Ok(rows) => (rows, None),
        Err(e) => {
            log::warn!("balance: {e}");
            (vec![], Some(e.to_string()))
        }
    };
    write_csv(
        &p.path(MATCHES),
        refined.entries.iter().map(|e| MatchRow {
            treatment_id: e.treatment_id.clone(),
            control_id: e.control_id.clone(),
            propensity_treatment: e.propensity_treatment,
            propensity_control: e.propensity_control,
            distance: e.distance(),
            knn_rank: e.knn_rank,
            refinement_score: e.refinement_score,
            retained: e.retained,
        }),
    )?;
    write_csv(&p.path(BALANCE), &balance)?;
    let summary = MatchSummary {
        scorer: cfg.scorer,
        features: propensity.features,
        penalized_fallback: propensity.penalized_fallback,
        n_treated: treated.len(),
        n_pool: pool.len(),
        n_retained: refined.retained().count(),
        short: refined.short.clone(),
        unmatched: refined.unmatched.clone(),
        balance_error,
        calls: refined.calls,
    };
    write_json(&p.path(SCORER_CALLS), &summary)?;
    Ok(names(&[MATCHES, BALANCE, SCORER_CALLS]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessOutput {
    #[serde(flatten)]
    pub report: RobustnessReport,
    /// Analyses that were requested but could not run.
    pub errors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub metric: crate::robustness::EngagementMetric,
    pub group: Group,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub n_outliers: usize,
}

fn robustness(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let cfg = &p.config.robustness;
    let (ds, _) = assign_reference_events(&load_filtered(p)?, EventPolicy::Standard);
    let topics = selected_topics(p)?;
    let q = p.config.fdr.robustness;
    let window = p.config.dataset.window_weeks();
    let mut report = RobustnessReport::default();
    let mut errors = BTreeMap::new();
    if let Some(date) = cfg.fixed_date {
        match external_event_analysis(&ds, date, &topics, window, q) {
            Ok(r) => report.external_event = Some(r),
            Err(e) => {
                errors.insert("external_event".to_string(), e.to_string());
            }
        }
    }
    if cfg.engagement {
        report.engagement = Some(engagement_comparison(&ds, q));
    }
    if !cfg.gap_groups.is_empty() {
        match activity_gap_analysis(&ds, &cfg.gap_groups) {
            Ok(r) => report.activity_gaps = Some(r),
            Err(e) => {
                errors.insert("activity_gaps".to_string(), e.to_string());
            }
        }
    }
    if !cfg.exclude.is_empty() {
        let exclusion: BTreeSet<String> = cfg.exclude.iter().cloned().collect();
        let opts = SensitivityOptions {
            topic_ids: topics.clone(),
            glmm: Some(p.config.glmm.clone()),
            temporal: true,
            window_weeks: window,
            q,
        };
        match sensitivity_refit(&ds, &exclusion, &opts) {
            Ok(r) => report.sensitivity = Some(r),
            Err(e) => {
                errors.insert("sensitivity".to_string(), e.to_string());
            }
        }
    }
    let boxes: Vec<BoxRow> = report
        .engagement
        .iter()
        .flat_map(|e| &e.metrics)
        .flat_map(|m| {
            m.summaries.iter().map(|(&group, b)| BoxRow {
                metric: m.metric,
                group,
                n: b.n,
                min: b.min,
                q1: b.q1,
                median: b.median,
                q3: b.q3,
                max: b.max,
                whisker_low: b.whisker_low,
                whisker_high: b.whisker_high,
                n_outliers: b.outliers.len(),
            })
        })
        .collect();
    write_json(&p.path(ROBUSTNESS), &RobustnessOutput { report, errors })?;
    write_csv(&p.path(BOX_STATS), boxes)?;
    Ok(names(&[ROBUSTNESS, BOX_STATS]))
}
