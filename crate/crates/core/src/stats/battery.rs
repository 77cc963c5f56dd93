//! Per-bin test batteries over aligned series.

use serde::{Deserialize, Serialize};

use super::{bh_fdr, paired_t, welch_t, StatsError, TestResult};
use crate::cohort::Group;
use crate::temporal::{bin_indices, AlignedSeries, Alignment};

/// What each bin is compared against in the within-group battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The interpolated value at the event week (t = 0).
    #[default]
    Anchor,
    /// One of the 30 bins.
    Bin(i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithinCell {
    pub bin_index: i32,
    /// `None` when the bin was degenerate and left out of the BH family.
    pub result: Option<TestResult>,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetweenCell {
    pub group: Group,
    pub bin_index: i32,
    pub result: Option<TestResult>,
    pub rejected: bool,
}

fn baseline_values(aligned: &[&AlignedSeries], baseline: Baseline) -> Vec<f64> {
    aligned
        .iter()
        .map(|s| match baseline {
            Baseline::Anchor => s.anchor,
            Baseline::Bin(b) => s.bin(b),
        })
        .collect()
}

/// Writes BH-adjusted p-values into the successful results. Failed cells
/// shrink the family.
fn adjust(results: &mut [Option<TestResult>], q: f64) -> Result<Vec<bool>, StatsError> {
    let p: Vec<f64> = results.iter().flatten().map(|r| r.p_value).collect();
    let (adj, rej) = bh_fdr(&p, q)?;
    let mut k = 0;
    let mut rejected = vec![false; results.len()];
    for (i, r) in results.iter_mut().enumerate() {
        if let Some(r) = r {
            r.p_adjusted = Some(adj[k]);
            rejected[i] = rej[k];
            k += 1;
        }
    }
    Ok(rejected)
}

/// One paired t-test per bin against the baseline, BH-adjusted across bins.
pub fn within_group_test(
    aligned: &[&AlignedSeries],
    baseline: Baseline,
    q: f64,
) -> Result<Vec<WithinCell>, StatsError> {
    if aligned.len() < 2 {
        return Err(StatsError::TooFewObservations { needed: 2, got: aligned.len() });
    }
    let base = baseline_values(aligned, baseline);
    let bins: Vec<i32> = bin_indices().collect();
    let mut results: Vec<Option<TestResult>> = bins
        .iter()
        .map(|&b| {
            let y: Vec<f64> = aligned.iter().map(|s| s.bin(b)).collect();
            match paired_t(&base, &y) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::debug!("within-group bin {b}: {e}; dropped from BH family");
                    None
                }
            }
        })
        .collect();
    let rejected = adjust(&mut results, q)?;
    Ok(bins
        .into_iter()
        .zip(results)
        .zip(rejected)
        .map(|((bin_index, result), rejected)| WithinCell { bin_index, result, rejected })
        .collect())
}

/// Welch test of treatment vs each control group at every bin, with all
/// cells in a single BH family (30 bins × controls).
pub fn between_group_test(
    treatment: &[&AlignedSeries],
    controls: &[(Group, Vec<&AlignedSeries>)],
    q: f64,
) -> Result<Vec<BetweenCell>, StatsError> {
    let mut keys = Vec::new();
    let mut results = Vec::new();
    for (group, series) in controls {
        for b in bin_indices() {
            let t: Vec<f64> = treatment.iter().map(|s| s.bin(b)).collect();
            let c: Vec<f64> = series.iter().map(|s| s.bin(b)).collect();
            keys.push((*group, b));
            results.push(match welch_t(&t, &c) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::debug!("between-group {group} bin {b}: {e}; dropped from BH family");
                    None
                }
            });
        }
    }
    let rejected = adjust(&mut results, q)?;
    Ok(keys
        .into_iter()
        .zip(results)
        .zip(rejected)
        .map(|(((group, bin_index), result), rejected)| BetweenCell { group, bin_index, result, rejected })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicWithin {
    pub topic_id: u32,
    pub group: Group,
    pub cells: Vec<WithinCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicBetween {
    pub topic_id: u32,
    pub cells: Vec<BetweenCell>,
}

/// Within-group battery for every (topic, group) with at least two series.
pub fn within_battery(alignment: &Alignment, topic_ids: &[u32], baseline: Baseline, q: f64) -> Vec<TopicWithin> {
    let mut out = Vec::new();
    for &topic_id in topic_ids {
        for group in Group::ALL {
            let series = alignment.for_topic(topic_id, group);
            match within_group_test(&series, baseline, q) {
                Ok(cells) => out.push(TopicWithin { topic_id, group, cells }),
                Err(e) => log::info!("within-group topic {topic_id} {group}: {e}"),
            }
        }
    }
    out
}

/// Treatment vs each control group with at least two series, per topic.
pub fn between_battery(alignment: &Alignment, topic_ids: &[u32], q: f64) -> Vec<TopicBetween> {
    let mut out = Vec::new();
    for &topic_id in topic_ids {
        let treatment = alignment.for_topic(topic_id, Group::AttemptedDuring);
        if treatment.len() < 2 {
            log::info!("between-group topic {topic_id}: fewer than two treatment series");
            continue;
        }
        let controls: Vec<(Group, Vec<&AlignedSeries>)> = Group::CONTROLS
            .iter()
            .map(|&g| (g, alignment.for_topic(topic_id, g)))
            .filter(|(_, s)| s.len() >= 2)
            .collect();
        if controls.is_empty() {
            continue;
        }
        match between_group_test(&treatment, &controls, q) {
            Ok(cells) => out.push(TopicBetween { topic_id, cells }),
            Err(e) => log::info!("between-group topic {topic_id}: {e}"),
        }
    }
    out
}
