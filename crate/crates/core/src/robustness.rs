//! Checks that the main findings are not artifacts: calendar-date
//! realignment, engagement comparisons, posting-gap analysis and refits with
//! channels excluded.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortDataset, Group};
use crate::glmm::{run_topic_battery, GlmmSpec};
use crate::stats::{between_battery, bh_fdr, welch_t, TestResult, TopicBetween};
use crate::temporal::{align_dataset, assign_reference_events, pre_post_table, EventPolicy};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobustnessError {
    #[error("{date} lies within the upload span of fewer than two channels in at least two groups")]
    DateOutsideSpans { date: NaiveDate },
    #[error("group {0} has no usable channels")]
    EmptyGroup(Group),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("group {0} has no dated events; posting gaps need real events")]
    SyntheticEvents(Group),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEventReport {
    pub fixed_date: NaiveDate,
    pub realigned: Vec<TopicBetween>,
    pub realigned_rejections: usize,
    pub realigned_tests: usize,
    /// Rejections in the event-anchored battery over the same topics.
    pub anchored_rejections: usize,
    pub anchored_tests: usize,
}

fn count(battery: &[TopicBetween]) -> (usize, usize) {
    let cells = battery.iter().flat_map(|t| &t.cells);
    let tested = cells.clone().filter(|c| c.result.is_some()).count();
    (cells.filter(|c| c.rejected).count(), tested)
}

/// Re-anchors every channel to `fixed_date` and re-runs the between-group
/// battery. `ds` must already carry its own reference events; the
/// event-anchored battery is recomputed from it for comparison.
pub fn external_event_analysis(
    ds: &CohortDataset,
    fixed_date: NaiveDate,
    topic_ids: &[u32],
    window_weeks: i64,
    q: f64,
) -> Result<ExternalEventReport, RobustnessError> {
    let mut covered: BTreeMap<Group, usize> = BTreeMap::new();
    for c in ds.channels() {
        let uploads = ds.uploads_of(&c.channel_id);
        if let (Some(first), Some(last)) = (uploads.first(), uploads.last()) {
            if first.date() <= fixed_date && fixed_date <= last.date() {
                *covered.entry(c.group).or_insert(0) += 1;
            }
        }
    }
    let groups_ok = covered.values().filter(|&&n| n >= 2).count();
    if groups_ok < 2 || covered.get(&Group::AttemptedDuring).copied().unwrap_or(0) < 2 {
        return Err(RobustnessError::DateOutsideSpans { date: fixed_date });
    }
    let anchored = between_battery(&align_dataset(ds, topic_ids, window_weeks), topic_ids, q);
    let (realigned_ds, _) = assign_reference_events(ds, EventPolicy::Fixed(fixed_date));
    let realigned = between_battery(&align_dataset(&realigned_ds, topic_ids, window_weeks), topic_ids, q);
    let (realigned_rejections, realigned_tests) = count(&realigned);
    let (anchored_rejections, anchored_tests) = count(&anchored);
    Ok(ExternalEventReport {
        fixed_date,
        realigned,
        realigned_rejections,
        realigned_tests,
        anchored_rejections,
        anchored_tests,
    })
}

/// Box-plot summary. Quartiles use linear interpolation between order
/// statistics (`h = (n - 1) p`); whiskers reach the most extreme values
/// within 1.5 IQR of the quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
    Some(BoxStats {
        n: v.len(),
        min: v[0],
        q1,
        median,
        q3,
        max: v[v.len() - 1],
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngagementMetric {
    Uploads,
    Likes,
    Comments,
    Duration,
}

impl EngagementMetric {
    pub const ALL: [EngagementMetric; 4] =
        [EngagementMetric::Uploads, EngagementMetric::Likes, EngagementMetric::Comments, EngagementMetric::Duration];

    pub fn as_str(self) -> &'static str {
        match self {
            EngagementMetric::Uploads => "uploads",
            EngagementMetric::Likes => "likes",
            EngagementMetric::Comments => "comments",
            EngagementMetric::Duration => "duration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub group_a: Group,
    pub group_b: Group,
    pub result: Option<TestResult>,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: EngagementMetric,
    pub summaries: BTreeMap<Group, BoxStats>,
    pub tests: Vec<PairTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementReport {
    pub metrics: Vec<MetricComparison>,
    pub skipped: Vec<EngagementMetric>,
}

/// Channel total for counts, channel mean for duration. `None` when the
/// channel has no value for the metric.
fn channel_metric(ds: &CohortDataset, channel_id: &str, metric: EngagementMetric) -> Option<f64> {
    let uploads = ds.uploads_of(channel_id);
    let total = |get: fn(&crate::cohort::Upload) -> Option<u64>| {
        let vals: Vec<u64> = uploads.iter().filter_map(get).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<u64>() as f64)
    };
    match metric {
        EngagementMetric::Uploads => Some(uploads.len() as f64),
        EngagementMetric::Likes => total(|u| u.likes),
        EngagementMetric::Comments => total(|u| u.comments),
        EngagementMetric::Duration => {
            (!uploads.is_empty()).then(|| uploads.iter().map(|u| u.duration_s).sum::<f64>() / uploads.len() as f64)
        }
    }
}

/// Welch tests on channel aggregates across every pair of groups, BH within
/// each metric.
pub fn engagement_comparison(ds: &CohortDataset, q: f64) -> EngagementReport {
    let mut metrics = Vec::new();
    let mut skipped = Vec::new();
    for metric in EngagementMetric::ALL {
        let values: BTreeMap<Group, Vec<f64>> = Group::ALL
            .iter()
            .map(|&g| (g, ds.channels_in(g).filter_map(|c| channel_metric(ds, &c.channel_id, metric)).collect()))
            .collect();
        if values.values().all(|v| v.is_empty()) {
            log::info!("engagement metric {} missing everywhere; skipped", metric.as_str());
            skipped.push(metric);
            continue;
        }
        let summaries = values.iter().filter_map(|(g, v)| box_stats(v).map(|b| (*g, b))).collect();
        let mut tests: Vec<PairTest> = Vec::new();
        for (i, &a) in Group::ALL.iter().enumerate() {
            for &b in &Group::ALL[i + 1..] {
                let result = welch_t(&values[&a], &values[&b]).ok();
                tests.push(PairTest { group_a: a, group_b: b, result, rejected: false });
            }
        }
        let p: Vec<f64> = tests.iter().filter_map(|t| t.result.as_ref().map(|r| r.p_value)).collect();
        if let Ok((adj, rej)) = bh_fdr(&p, q) {
            for (t, (a, r)) in tests.iter_mut().filter(|t| t.result.is_some()).zip(adj.into_iter().zip(rej)) {
                t.result.as_mut().expect("filtered").p_adjusted = Some(a);
                t.rejected = r;
            }
        }
        metrics.push(MetricComparison { metric, summaries, tests });
    }
    EngagementReport { metrics, skipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    BeforeToAfter,
    BeforeToEvent,
    EventToAfter,
}

impl IntervalKind {
    pub const ALL: [IntervalKind; 3] =
        [IntervalKind::BeforeToAfter, IntervalKind::BeforeToEvent, IntervalKind::EventToAfter];

    pub fn as_str(self) -> &'static str {
        match self {
            IntervalKind::BeforeToAfter => "before_to_after",
            IntervalKind::BeforeToEvent => "before_to_event",
            IntervalKind::EventToAfter => "event_to_after",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGaps {
    pub channel_id: String,
    pub group: Group,
    pub before_to_after: Option<i64>,
    pub before_to_event: Option<i64>,
    pub event_to_after: Option<i64>,
}

impl ChannelGaps {
    pub fn get(&self, kind: IntervalKind) -> Option<i64> {
        match kind {
            IntervalKind::BeforeToAfter => self.before_to_after,
            IntervalKind::BeforeToEvent => self.before_to_event,
            IntervalKind::EventToAfter => self.event_to_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

fn describe(values: &[f64]) -> Option<Descriptive> {
    let b = box_stats(values)?;
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(Descriptive { n, mean, median: b.median, sd, min: b.min, max: b.max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub kind: IntervalKind,
    pub per_group: BTreeMap<Group, Descriptive>,
    pub tests: Vec<PairTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub channels: Vec<ChannelGaps>,
    pub intervals: Vec<IntervalStats>,
}

/// Calendar-day gaps between the last upload before the event, the event,
/// and the first upload after it. Uploads on the event day count on neither
/// side.
pub fn channel_gaps(ds: &CohortDataset, channel_id: &str) -> Option<ChannelGaps> {
    let c = ds.channel(channel_id)?;
    let ev = c.reference_event.as_ref()?.date;
    let uploads = ds.uploads_of(channel_id);
    let last_pre = uploads.iter().map(|u| u.date()).filter(|d| *d < ev).max();
    let first_post = uploads.iter().map(|u| u.date()).filter(|d| *d > ev).min();
    Some(ChannelGaps {
        channel_id: channel_id.to_string(),
        group: c.group,
        before_to_after: last_pre.zip(first_post).map(|(a, b)| (b - a).num_days()),
        before_to_event: last_pre.map(|a| (ev - a).num_days()),
        event_to_after: first_post.map(|b| (b - ev).num_days()),
    })
}

/// Gap descriptives per group and Welch tests between every pair of the
/// requested groups, one per interval kind. Missing gaps are excluded.
pub fn activity_gap_analysis(ds: &CohortDataset, groups: &[Group]) -> Result<GapReport, RobustnessError> {
    if let Some(&g) = groups.iter().find(|g| !g.has_dated_event()) {
        return Err(RobustnessError::SyntheticEvents(g));
    }
    let channels: Vec<ChannelGaps> = ds
        .channels()
        .iter()
        .filter(|c| groups.contains(&c.group))
        .filter_map(|c| channel_gaps(ds, &c.channel_id))
        .collect();
    let intervals = IntervalKind::ALL
        .iter()
        .map(|&kind| {
            let values = |g: Group| -> Vec<f64> {
                channels.iter().filter(|c| c.group == g).filter_map(|c| c.get(kind)).map(|d| d as f64).collect()
            };
            let per_group = groups.iter().filter_map(|&g| describe(&values(g)).map(|d| (g, d))).collect();
            let mut tests = Vec::new();
            for (i, &a) in groups.iter().enumerate() {
                for &b in &groups[i + 1..] {
                    let result = welch_t(&values(a), &values(b)).ok();
                    tests.push(PairTest { group_a: a, group_b: b, result, rejected: false });
                }
            }
            IntervalStats { kind, per_group, tests }
        })
        .collect();
    Ok(GapReport { channels, intervals })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDelta {
    pub topic_id: u32,
    pub term: String,
    pub baseline: f64,
    pub refit: f64,
    pub sign_agrees: bool,
    pub baseline_significant: bool,
    pub refit_significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub topic_id: u32,
    pub group: Group,
    pub bin_index: i32,
    pub baseline_rejected: bool,
    pub refit_rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub excluded: Vec<String>,
    pub coefficients: Vec<CoefficientDelta>,
    pub temporal: Vec<CellDelta>,
    pub sign_agreement: Option<f64>,
    pub significance_flips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOptions {
    pub topic_ids: Vec<u32>,
    pub glmm: Option<GlmmSpec>,
    pub temporal: bool,
    pub window_weeks: i64,
    pub q: f64,
}

/// Re-runs the chosen analyses without `exclusion` and compares with the
/// full dataset. `ds` must carry reference events.
pub fn sensitivity_refit(
    ds: &CohortDataset,
    exclusion: &BTreeSet<String>,
    opts: &SensitivityOptions,
) -> Result<SensitivityReport, RobustnessError> {
    if let Some(id) = exclusion.iter().find(|id| ds.channel(id).is_none()) {
        return Err(RobustnessError::UnknownChannel(id.clone()));
    }
    let reduced = ds.retain_channels(|c| !exclusion.contains(&c.channel_id));
    for g in Group::ALL {
        if ds.channels_in(g).next().is_some() && reduced.channels_in(g).next().is_none() {
            return Err(RobustnessError::EmptyGroup(g));
        }
    }
    let mut coefficients = Vec::new();
    if let Some(spec) = &opts.glmm {
        let fit = |d: &CohortDataset| run_topic_battery(d, &opts.topic_ids, &pre_post_table(d, &opts.topic_ids), spec, opts.q);
        let (base, refit) = (fit(ds), fit(&reduced));
        let significant = |p: Option<f64>| p.is_some_and(|p| p < opts.q);
        for b in base.fits() {
            let Some(r) = refit.fits().find(|r| r.topic_id == b.topic_id) else { continue };
            for bt in &b.terms {
                let Some(rt) = r.term(&bt.name) else { continue };
                coefficients.push(CoefficientDelta {
                    topic_id: b.topic_id,
                    term: bt.name.clone(),
                    baseline: bt.estimate,
                    refit: rt.estimate,
                    sign_agrees: bt.estimate.signum() == rt.estimate.signum(),
                    baseline_significant: significant(bt.p_adjusted),
                    refit_significant: significant(rt.p_adjusted),
                });
            }
        }
    }
    let mut temporal = Vec::new();
    if opts.temporal {
        let run = |d: &CohortDataset| between_battery(&align_dataset(d, &opts.topic_ids, opts.window_weeks), &opts.topic_ids, opts.q);
        let (base, refit) = (run(ds), run(&reduced));
        for b in &base {
            let Some(r) = refit.iter().find(|r| r.topic_id == b.topic_id) else { continue };
            for bc in &b.cells {
                let rc = r.cells.iter().find(|c| c.group == bc.group && c.bin_index == bc.bin_index);
                temporal.push(CellDelta {
                    topic_id: b.topic_id,
                    group: bc.group,
                    bin_index: bc.bin_index,
                    baseline_rejected: bc.rejected,
                    refit_rejected: rc.is_some_and(|c| c.rejected),
                });
            }
        }
    }
    let sign_agreement = (!coefficients.is_empty())
        .then(|| coefficients.iter().filter(|c| c.sign_agrees).count() as f64 / coefficients.len() as f64);
    let significance_flips = coefficients.iter().filter(|c| c.baseline_significant != c.refit_significant).count()
        + temporal.iter().filter(|c| c.baseline_rejected != c.refit_rejected).count();
    Ok(SensitivityReport {
        excluded: exclusion.iter().cloned().collect(),
        coefficients,
        temporal,
        sign_agreement,
        significance_flips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RobustnessReport {
    pub sensitivity: Option<SensitivityReport>,
    pub external_event: Option<ExternalEventReport>,
    pub engagement: Option<EngagementReport>,
    pub activity_gaps: Option<GapReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fixtures::{channel, date, topic, upload};
    use crate::cohort::{EventKind, ReferenceEvent};
    use chrono::Duration;

    #[test]
    fn quartile_convention() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!(b.whisker_high, 4.0);
        assert!(box_stats(&[]).is_none());
    }

    fn gap_channel(id: &str, group: crate::cohort::Group, ev: NaiveDate, days: &[i64]) -> (crate::cohort::Channel, Vec<crate::cohort::Upload>) {
        let mut c = channel(id, group);
        c.reference_event = Some(ReferenceEvent::exact(
            if group == Group::AttemptedDuring { EventKind::Attempt } else { EventKind::MajorLifeEvent },
            ev,
        ));
        let ups = days.iter().map(|&d| upload(&format!("{id}-{d}"), id, ev + Duration::days(d), vec![0.1])).collect();
        (c, ups)
    }

    #[test]
    fn gap_arithmetic() {
        let ev = date(2020, 6, 1);
        let (c, u) = gap_channel("a", Group::AttemptedDuring, ev, &[-40, -20, 0, 20, 35]);
        let ds = CohortDataset::new(vec![c], u, vec![topic(0)]).unwrap();
        let g = channel_gaps(&ds, "a").unwrap();
        assert_eq!((g.before_to_event, g.event_to_after, g.before_to_after), (Some(20), Some(20), Some(40)));
        let (c, u) = gap_channel("b", Group::AttemptedDuring, ev, &[-3, -1]);
        let ds = CohortDataset::new(vec![c], u, vec![topic(0)]).unwrap();
        let g = channel_gaps(&ds, "b").unwrap();
        assert_eq!((g.before_to_event, g.event_to_after, g.before_to_after), (Some(1), None, None));
    }

    #[test]
    fn gap_medians_and_single_channel_groups() {
        let ev = date(2021, 3, 1);
        let mut chans = vec![];
        let mut ups = vec![];
        // attempted: gaps 10/20/30 days around the event; controls: 3/6/9
        for (i, d) in [10i64, 20, 30].iter().enumerate() {
            let (c, u) = gap_channel(&format!("t{i}"), Group::AttemptedDuring, ev, &[-d, *d]);
            chans.push(c);
            ups.extend(u);
        }
        let (c, u) = gap_channel("m0", Group::ControlMajorLifeEvent, ev, &[-6, 6]);
        chans.push(c);
        ups.extend(u);
        let ds = CohortDataset::new(chans, ups, vec![topic(0)]).unwrap();
        let report = activity_gap_analysis(&ds, &[Group::AttemptedDuring, Group::ControlMajorLifeEvent]).unwrap();
        let bte = report.intervals.iter().find(|i| i.kind == IntervalKind::BeforeToEvent).unwrap();
        assert_eq!(bte.per_group[&Group::AttemptedDuring].median, 20.0);
        assert_eq!(bte.per_group[&Group::ControlMajorLifeEvent].median, 6.0);
        assert!(bte.tests[0].result.is_none());
        for c in &report.channels {
            if let (Some(a), Some(b), Some(t)) = (c.before_to_event, c.event_to_after, c.before_to_after) {
                assert_eq!(a + b, t);
            }
        }
        assert_eq!(
            activity_gap_analysis(&ds, &[Group::ControlMatches]).unwrap_err(),
            RobustnessError::SyntheticEvents(Group::ControlMatches)
        );
    }

    #[test]
    fn external_date_outside_spans_errors() {
        let ev = date(2020, 6, 1);
        let (c, u) = gap_channel("a", Group::AttemptedDuring, ev, &[-40, 40]);
        let ds = CohortDataset::new(vec![c], u, vec![topic(0)]).unwrap();
        assert!(matches!(
            external_event_analysis(&ds, date(1999, 1, 1), &[0], 78, 0.05),
            Err(RobustnessError::DateOutsideSpans { .. })
        ));
    }
}
