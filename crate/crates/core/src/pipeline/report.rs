//! Collates stage outputs into `report.md` plus plot-data CSVs under
//! `plots/`. Every number is read from a stage file; nothing is refit.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::output::{read_csv, read_json, write_atomic, write_csv};
use super::stages::*;
use super::{Pipeline, PipelineError};
use crate::cohort::Group;
use crate::glmm::TermKind;
use crate::matching::BalanceRow;
use crate::stats::tfidf;
use crate::synth::GroundTruth;

pub(crate) const REPORT: &str = "report.md";
const PLOT_CURVES: &str = "plots/group_curves.csv";
const PLOT_BOXES: &str = "plots/box_stats.csv";
const PLOT_WORDS: &str = "plots/word_scores.csv";
const WORDS_PER_TOPIC: usize = 25;

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt4(x: Option<f64>) -> String {
    x.map(f4).unwrap_or_else(|| "-".into())
}

fn read_if<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, PipelineError> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn read_csv_if<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<Vec<T>>, PipelineError> {
    if path.exists() {
        read_csv(path).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlotCurveRow {
    topic_id: u32,
    group: Group,
    bin_index: i32,
    mean: f64,
    se: f64,
    lower: f64,
    upper: f64,
    n: usize,
    /// Significant versus the group's own baseline.
    within_rejected: Option<bool>,
    /// Significant versus the treatment group at this bin.
    between_rejected: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct DocumentRow {
    topic_id: u32,
    text: String,
}

#[derive(Debug, Serialize)]
struct WordRow {
    topic_id: u32,
    rank: usize,
    word: String,
    score: f64,
}

pub(super) fn build(p: &Pipeline) -> Result<Vec<String>, PipelineError> {
    let mut outputs = vec![REPORT.to_string()];
    let mut md = String::from("# Cohort analysis report\n");

    let validation: ValidationSummary = read_json(&p.path(VALIDATION))?;
    let filter: FilterSummary = read_json(&p.path(EXCLUSIONS))?;
    let selection: SelectionReport = read_json(&p.path(SELECTION))?;
    data_section(&mut md, &validation, &filter);
    selection_section(&mut md, &selection);

    let glmm: Option<Vec<GlmmRow>> = read_csv_if(&p.path(GLMM_RESULTS))?;
    let meta: Option<ModelMeta> = read_if(&p.path(MODEL_META))?;
    match (&glmm, &meta) {
        (Some(rows), Some(meta)) => {
            glmm_section(&mut md, rows, meta);
            if let Some(truth) = read_if::<GroundTruth>(&p.path(GROUND_TRUTH))? {
                recovery_section(&mut md, rows, meta, &truth);
            }
        }
        _ => md.push_str("\n## Mixed-model effects\n\nNot run.\n"),
    }

    let temporal: Option<Vec<TemporalRow>> = read_csv_if(&p.path(TEMPORAL))?;
    match &temporal {
        Some(rows) => temporal_section(&mut md, rows),
        None => md.push_str("\n## Temporal tests\n\nNot run.\n"),
    }

    let matches: Option<MatchSummary> = read_if(&p.path(SCORER_CALLS))?;
    match matches {
        Some(m) => {
            let balance: Vec<BalanceRow> = read_csv(&p.path(BALANCE))?;
            matching_section(&mut md, &m, &balance);
        }
        None => md.push_str("\n## Matching\n\nNot run.\n"),
    }

    let robustness: Option<RobustnessOutput> = read_if(&p.path(ROBUSTNESS))?;
    match &robustness {
        Some(r) => robustness_section(&mut md, r),
        None => md.push_str("\n## Robustness\n\nNot run.\n"),
    }

    write_atomic(&p.path(REPORT), md.as_bytes())?;

    let curves: Vec<CurveRow> = read_csv(&p.path(GROUP_CURVES))?;
    write_csv(&p.path(PLOT_CURVES), plot_curves(&curves, temporal.as_deref().unwrap_or(&[])))?;
    outputs.push(PLOT_CURVES.into());
    if p.path(BOX_STATS).exists() {
        let bytes = std::fs::read(p.path(BOX_STATS)).map_err(|e| PipelineError::io(&p.path(BOX_STATS), e))?;
        write_atomic(&p.path(PLOT_BOXES), &bytes)?;
        outputs.push(PLOT_BOXES.into());
    }
    if let Some(path) = &p.config.paths.topic_documents {
        let docs: Vec<DocumentRow> = read_csv(path)?;
        let mut corpus: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for d in docs {
            corpus.entry(d.topic_id).or_default().push(d.text);
        }
        let rows = tfidf(&corpus, &HashSet::new()).into_iter().flat_map(|(topic_id, words)| {
            words.into_iter().take(WORDS_PER_TOPIC).enumerate().map(move |(i, (word, score))| WordRow {
                topic_id,
                rank: i + 1,
                word,
                score,
            })
        });
        write_csv(&p.path(PLOT_WORDS), rows)?;
        outputs.push(PLOT_WORDS.into());
    }
    Ok(outputs)
}

fn data_section(md: &mut String, v: &ValidationSummary, f: &FilterSummary) {
    md.push_str("\n## Data\n\n| group | channels loaded |\n|---|---|\n");
    for (g, n) in &v.channels_per_group {
        let _ = writeln!(md, "| {g} | {n} |");
    }
    let _ = writeln!(
        md,
        "\n{} channels, {} uploads, {} topics loaded; {} validation violations.",
        v.channels,
        v.uploads,
        v.topics,
        v.violations.len()
    );
    for (code, n) in &v.violation_counts {
        let _ = writeln!(md, "- {code:?}: {n}");
    }
    if let Some(t) = &f.transcripts {
        let _ = writeln!(md, "\nTranscripts classified: {}, invalid: {}.", t.classified, t.invalid);
    }
    let _ = writeln!(
        md,
        "\nChannels retained after filtering (min valid uploads {}): {}; excluded: {}.",
        f.channels.min_valid,
        f.channels.retained,
        f.channels.exclusions.len()
    );
}

fn selection_section(md: &mut String, s: &SelectionReport) {
    md.push_str("\n## Topic selection\n\n");
    let list = |t: &[u32]| t.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
    let _ = writeln!(md, "Selected topics: {}", list(&s.selected_topics));
    if s.configured {
        md.push_str("\nTopics were fixed in the configuration.\n");
    }
    if s.fallback_all {
        md.push_str("\nNo contrast selected any topic; all topics were kept.\n");
    }
    if s.selectors.is_empty() {
        return;
    }
    md.push_str("\n| contrast | treated | controls | stepwise | LASSO (min CV) | Jaccard |\n|---|---|---|---|---|---|\n");
    for o in &s.selectors {
        let step = o.stepwise.as_ref().map(|t| t.final_features.join(" ")).unwrap_or_else(|| "-".into());
        let lasso = o.lasso.as_ref().map(|l| l.support_min.join(" ")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            o.selector.as_str(),
            o.n_treated,
            o.n_controls,
            step,
            lasso,
            opt4(o.agreement)
        );
    }
    for o in s.selectors.iter().filter(|o| o.error.is_some()) {
        let _ = writeln!(md, "\n- {}: {}", o.selector.as_str(), o.error.as_deref().unwrap_or_default());
    }
}

fn glmm_section(md: &mut String, rows: &[GlmmRow], meta: &ModelMeta) {
    let _ = writeln!(
        md,
        "\n## Mixed-model effects\n\nReference group {}; BH within each term family at q = {}.\n",
        meta.reference_group, meta.q
    );
    md.push_str("| topic | term | estimate | SE | odds ratio | change % | p | p (BH) |\n|---|---|---|---|---|---|---|---|\n");
    for r in rows.iter().filter(|r| matches!(r.kind, TermKind::Time | TermKind::Group | TermKind::GroupTime)) {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.topic_id,
            r.term,
            f4(r.estimate),
            f4(r.std_error),
            f4(r.odds_ratio),
            format!("{:.1}", r.odds_change_percent),
            f4(r.p_value),
            opt4(r.p_adjusted)
        );
    }
    md.push_str("\n| topic | sigma2 | phi | log-lik | converged | boundary |\n|---|---|---|---|---|---|\n");
    for t in &meta.topics {
        match &t.error {
            Some(e) => {
                let _ = writeln!(md, "| {} | not fitted: {e} | | | | |", t.topic_id);
            }
            None => {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} |",
                    t.topic_id,
                    opt4(t.sigma2),
                    opt4(t.phi),
                    opt4(t.log_likelihood),
                    t.converged.unwrap_or(false),
                    t.boundary.unwrap_or(false)
                );
            }
        }
    }
}

fn true_value(truth: &GroundTruth, topic: u32, kind: TermKind, group: Option<Group>) -> Option<f64> {
    let e = truth.spec.effects_for(topic);
    let k = group.and_then(|g| Group::CONTROLS.iter().position(|&c| c == g));
    match kind {
        TermKind::Time => Some(e.beta_time),
        TermKind::Group => k.map(|k| e.beta_group[k]),
        TermKind::GroupTime => k.map(|k| e.beta_group_time[k]),
        _ => None,
    }
}

fn recovery_section(md: &mut String, rows: &[GlmmRow], meta: &ModelMeta, truth: &GroundTruth) {
    md.push_str("\n## Recovery of simulated effects\n\n");
    if meta.reference_group != Group::AttemptedDuring {
        md.push_str("Simulated effects are relative to the treatment group; the fit used another reference.\n");
        return;
    }
    md.push_str("| topic | term | truth | estimate | error | error / SE |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let Some(t) = true_value(truth, r.topic_id, r.kind, r.group) else { continue };
        let err = r.estimate - t;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.topic_id,
            r.term,
            f4(t),
            f4(r.estimate),
            f4(err),
            format!("{:.2}", err / r.std_error)
        );
    }
}

fn temporal_section(md: &mut String, rows: &[TemporalRow]) {
    md.push_str("\n## Temporal tests\n\n| family | topic | group | tests | rejections |\n|---|---|---|---|---|\n");
    let mut counts: BTreeMap<(String, u32, Group), (usize, usize)> = BTreeMap::new();
    for r in rows {
        let fam = match r.family {
            Family::Within => "within",
            Family::Between => "between",
        };
        let c = counts.entry((fam.to_string(), r.topic_id, r.group)).or_insert((0, 0));
        c.0 += r.p_value.is_some() as usize;
        c.1 += r.rejected as usize;
    }
    for ((fam, topic, group), (tests, rej)) in counts {
        let _ = writeln!(md, "| {fam} | {topic} | {group} | {tests} | {rej} |");
    }
}

fn matching_section(md: &mut String, m: &MatchSummary, balance: &[BalanceRow]) {
    let _ = writeln!(
        md,
        "\n## Matching\n\n{} treated, {} pool; {} pairs retained; {} treated without a retained match.",
        m.n_treated,
        m.n_pool,
        m.n_retained,
        m.unmatched.len()
    );
    if m.penalized_fallback {
        md.push_str("\nThe propensity model separated; a penalized fit was used.\n");
    }
    if let Some(e) = &m.balance_error {
        let _ = writeln!(md, "\nBalance not computed: {e}");
    }
    if balance.is_empty() {
        return;
    }
    md.push_str("\n| feature | SMD before | SMD after |\n|---|---|---|\n");
    for b in balance {
        let _ = writeln!(md, "| {} | {} | {} |", b.feature, opt4(b.smd_before), opt4(b.smd_after));
    }
}

fn robustness_section(md: &mut String, r: &RobustnessOutput) {
    md.push_str("\n## Robustness\n");
    if let Some(x) = &r.report.external_event {
        let _ = writeln!(
            md,
            "\nRealigned to {}: {} of {} between-group tests rejected (event-anchored: {} of {}).",
            x.fixed_date, x.realigned_rejections, x.realigned_tests, x.anchored_rejections, x.anchored_tests
        );
    }
    if let Some(e) = &r.report.engagement {
        md.push_str("\n| metric | group A | group B | t | p (BH) | rejected |\n|---|---|---|---|---|---|\n");
        for m in &e.metrics {
            for t in &m.tests {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} |",
                    m.metric.as_str(),
                    t.group_a,
                    t.group_b,
                    opt4(t.result.as_ref().map(|r| r.statistic)),
                    opt4(t.result.as_ref().and_then(|r| r.p_adjusted)),
                    t.rejected
                );
            }
        }
    }
    if let Some(g) = &r.report.activity_gaps {
        md.push_str("\n| interval | group | n | median days | mean days |\n|---|---|---|---|---|\n");
        for i in &g.intervals {
            for (group, d) in &i.per_group {
                let _ = writeln!(md, "| {} | {} | {} | {} | {} |", i.kind.as_str(), group, d.n, f4(d.median), f4(d.mean));
            }
        }
    }
    if let Some(s) = &r.report.sensitivity {
        let _ = writeln!(
            md,
            "\nExcluding {} channels: sign agreement {}, significance flips {}.",
            s.excluded.len(),
            opt4(s.sign_agreement),
            s.significance_flips
        );
    }
    for (name, e) in &r.errors {
        let _ = writeln!(md, "\n- {name} not run: {e}");
    }
}

fn plot_curves(curves: &[CurveRow], tests: &[TemporalRow]) -> Vec<PlotCurveRow> {
    let mut within: BTreeMap<(u32, Group, i32), bool> = BTreeMap::new();
    let mut between: BTreeMap<(u32, Group, i32), bool> = BTreeMap::new();
    for t in tests {
        let target = match t.family {
            Family::Within => &mut within,
            Family::Between => &mut between,
        };
        target.insert((t.topic_id, t.group, t.bin_index), t.rejected);
    }
    curves
        .iter()
        .map(|c| {
            let key = (c.topic_id, c.group, c.bin_index);
            PlotCurveRow {
                topic_id: c.topic_id,
                group: c.group,
                bin_index: c.bin_index,
                mean: c.mean,
                se: c.se,
                lower: c.mean - c.se,
                upper: c.mean + c.se,
                n: c.n,
                within_rejected: within.get(&key).copied(),
                between_rejected: between.get(&key).copied(),
            }
        })
        .collect()
}
