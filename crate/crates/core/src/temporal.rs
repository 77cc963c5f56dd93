//! Event-anchored alignment of per-channel topic series.
//!
//! Weeks are 7-day offsets from the event date, not calendar weeks: an upload
//! `d` days after the event falls in week `ceil(d / 7)`, one `d` days before
//! in week `-ceil(d / 7)`. Uploads on the event date itself are dropped, so
//! week 0 is never observed directly; it is filled by interpolation when the
//! series spans the event and serves as the paired-test baseline.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Channel, CohortDataset, EventKind, Group, ReferenceEvent, Upload};

/// Number of resampled bins on each side of the event.
pub const BINS_PER_SIDE: usize = 15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemporalError {
    #[error("channel `{0}` has a dated-event group but no event date")]
    MissingEvent(String),
    #[error("channel `{0}` has no valid uploads to place a midpoint")]
    NoValidUploads(String),
    #[error("channel `{channel_id}` topic {topic_id}: fewer than two distinct in-window upload dates")]
    Undersampled { channel_id: String, topic_id: u32 },
    #[error("channel `{channel_id}`: event {event} lies outside the upload span by more than the window")]
    EventOutsideWindow { channel_id: String, event: NaiveDate },
    #[error("channel `{channel_id}` topic {topic_id}: no {side} points to resample")]
    EmptySide { channel_id: String, topic_id: u32, side: &'static str },
    #[error("aggregation needs at least two series, got {0}")]
    TooFewSeries(usize),
}

/// How reference events are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventPolicy {
    /// Loaded dates for groups with dated events, upload midpoints otherwise.
    #[default]
    Standard,
    /// Every channel anchored to one calendar date.
    Fixed(NaiveDate),
}

/// Signed week of `date` relative to `event`; `None` on the event date.
pub fn week_offset(event: NaiveDate, date: NaiveDate) -> Option<i64> {
    let d = (date - event).num_days();
    match d.signum() {
        0 => None,
        1 => Some((d + 6) / 7),
        _ => Some(-((-d + 6) / 7)),
    }
}

/// Lower median of the sorted unique dates of valid, non-narrative uploads.
pub fn upload_midpoint(uploads: &[Upload]) -> Option<NaiveDate> {
    let mut dates: Vec<NaiveDate> = uploads.iter().filter(|u| u.is_analyzable()).map(|u| u.date()).collect();
    dates.sort();
    dates.dedup();
    if dates.is_empty() {
        return None;
    }
    Some(dates[(dates.len() - 1) / 2])
}

pub fn assign_reference_event(
    channel: &Channel,
    uploads: &[Upload],
    policy: EventPolicy,
) -> Result<ReferenceEvent, TemporalError> {
    if let EventPolicy::Fixed(date) = policy {
        return Ok(ReferenceEvent::exact(EventKind::External, date));
    }
    if channel.group.has_dated_event() {
        return channel.reference_event.ok_or_else(|| TemporalError::MissingEvent(channel.channel_id.clone()));
    }
    let date = upload_midpoint(uploads).ok_or_else(|| TemporalError::NoValidUploads(channel.channel_id.clone()))?;
    Ok(ReferenceEvent::exact(EventKind::SyntheticMidpoint, date))
}

/// Assigns events to every channel. Channels that cannot be anchored are
/// returned alongside the error and left without an event.
pub fn assign_reference_events(
    ds: &CohortDataset,
    policy: EventPolicy,
) -> (CohortDataset, Vec<(String, TemporalError)>) {
    let mut events = std::collections::HashMap::new();
    let mut failures = Vec::new();
    for c in ds.channels() {
        match assign_reference_event(c, ds.uploads_of(&c.channel_id), policy) {
            Ok(ev) => {
                events.insert(c.channel_id.clone(), ev);
            }
            Err(e) => failures.push((c.channel_id.clone(), e)),
        }
    }
    (ds.with_reference_events(&events), failures)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklySeries {
    pub channel_id: String,
    pub topic_id: u32,
    /// `(week, value)` for every integer week between the first and last
    /// observed week.
    pub points: Vec<(i64, f64)>,
}

/// Interpolates one channel's topic values onto the weekly grid.
pub fn align_channel(
    channel_id: &str,
    uploads: &[Upload],
    topic_id: u32,
    topic_col: usize,
    event: &ReferenceEvent,
    window_weeks: i64,
) -> Result<WeeklySeries, TemporalError> {
    let mut by_week: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    let mut dates = Vec::new();
    let mut any_analyzable = false;
    for u in uploads.iter().filter(|u| u.is_analyzable()) {
        any_analyzable = true;
        let Some(week) = week_offset(event.date, u.date()) else { continue };
        if week.abs() > window_weeks {
            continue;
        }
        let e = by_week.entry(week).or_insert((0.0, 0));
        e.0 += u.topic_probabilities[topic_col];
        e.1 += 1;
        dates.push(u.date());
    }
    dates.sort();
    dates.dedup();
    if dates.len() < 2 {
        if any_analyzable && dates.is_empty() {
            return Err(TemporalError::EventOutsideWindow { channel_id: channel_id.to_string(), event: event.date });
        }
        return Err(TemporalError::Undersampled { channel_id: channel_id.to_string(), topic_id });
    }
    let knots: Vec<(i64, f64)> = by_week.into_iter().map(|(w, (s, n))| (w, s / n as f64)).collect();
    let mut points = Vec::new();
    for pair in knots.windows(2) {
        let ((w0, v0), (w1, v1)) = (pair[0], pair[1]);
        for w in w0..w1 {
            let t = (w - w0) as f64 / (w1 - w0) as f64;
            points.push((w, v0 + t * (v1 - v0)));
        }
    }
    points.push(*knots.last().expect("at least one knot"));
    Ok(WeeklySeries { channel_id: channel_id.to_string(), topic_id, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSeries {
    pub channel_id: String,
    pub topic_id: u32,
    pub group: Group,
    pub pre: [f64; BINS_PER_SIDE],
    pub post: [f64; BINS_PER_SIDE],
    /// Interpolated value at the event week.
    pub anchor: f64,
}

impl AlignedSeries {
    /// Value of bin `b` in `-15..=-1` or `1..=15`.
    pub fn bin(&self, b: i32) -> f64 {
        if b < 0 {
            self.pre[(b + BINS_PER_SIDE as i32) as usize]
        } else {
            self.post[(b - 1) as usize]
        }
    }
}

/// The 30 bin labels in output order.
pub fn bin_indices() -> impl Iterator<Item = i32> {
    (-(BINS_PER_SIDE as i32)..=-1).chain(1..=BINS_PER_SIDE as i32)
}

/// Linear interpolation of consecutive-week points at fractional week `x`.
fn interp(points: &[(i64, f64)], x: f64) -> f64 {
    let first = points[0].0 as f64;
    let last = points[points.len() - 1].0 as f64;
    let x = x.clamp(first, last);
    let offset = x - first;
    let i = (offset.floor() as usize).min(points.len() - 1);
    if i + 1 >= points.len() {
        return points[i].1;
    }
    let t = offset - i as f64;
    points[i].1 + t * (points[i + 1].1 - points[i].1)
}

fn resample_side(points: &[(i64, f64)]) -> [f64; BINS_PER_SIDE] {
    let mut out = [points[0].1; BINS_PER_SIDE];
    if points.len() == 1 {
        return out;
    }
    let first = points[0].0 as f64;
    let span = (points[points.len() - 1].0 - points[0].0) as f64;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = interp(points, first + span * i as f64 / (BINS_PER_SIDE - 1) as f64);
    }
    out
}

/// Maps each side of the weekly series onto 15 equally spaced positions
/// over that side's own span.
pub fn resample(series: &WeeklySeries, group: Group) -> Result<AlignedSeries, TemporalError> {
    let pre: Vec<(i64, f64)> = series.points.iter().copied().filter(|p| p.0 < 0).collect();
    let post: Vec<(i64, f64)> = series.points.iter().copied().filter(|p| p.0 > 0).collect();
    let empty = |side| TemporalError::EmptySide { channel_id: series.channel_id.clone(), topic_id: series.topic_id, side };
    if pre.is_empty() {
        return Err(empty("pre-event"));
    }
    if post.is_empty() {
        return Err(empty("post-event"));
    }
    // both sides non-empty and weeks consecutive, so week 0 is present
    let anchor = series.points.iter().find(|p| p.0 == 0).map(|p| p.1).expect("week 0 between sides");
    Ok(AlignedSeries {
        channel_id: series.channel_id.clone(),
        topic_id: series.topic_id,
        group,
        pre: resample_side(&pre),
        post: resample_side(&post),
        anchor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin_index: i32,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Per-bin mean and standard error (sample sd over √n).
pub fn aggregate_group(aligned: &[&AlignedSeries]) -> Result<Vec<BinSummary>, TemporalError> {
    if aligned.len() < 2 {
        return Err(TemporalError::TooFewSeries(aligned.len()));
    }
    let n = aligned.len();
    Ok(bin_indices()
        .map(|b| {
            let values: Vec<f64> = aligned.iter().map(|s| s.bin(b)).collect();
            // centred on the first value so identical series average exactly
            let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            BinSummary { bin_index: b, mean, se: (var / n as f64).sqrt(), n }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrePostMeans {
    pub channel_id: String,
    pub topic_id: u32,
    pub mean_before: Option<f64>,
    pub mean_after: Option<f64>,
    pub n_before: usize,
    pub n_after: usize,
}

impl PrePostMeans {
    /// Only one period is available.
    pub fn is_partial(&self) -> bool {
        self.mean_before.is_some() != self.mean_after.is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_before.is_none() && self.mean_after.is_none()
    }
}

/// Pre- and post-event means over valid, non-narrative uploads, skipping the
/// event date. No window is applied.
pub fn pre_post_means(
    channel_id: &str,
    uploads: &[Upload],
    topic_id: u32,
    topic_col: usize,
    event: &ReferenceEvent,
) -> PrePostMeans {
    let (mut sb, mut nb, mut sa, mut na) = (0.0, 0, 0.0, 0);
    for u in uploads.iter().filter(|u| u.is_analyzable()) {
        let d = u.date();
        let p = u.topic_probabilities[topic_col];
        if d < event.date {
            sb += p;
            nb += 1;
        } else if d > event.date {
            sa += p;
            na += 1;
        }
    }
    PrePostMeans {
        channel_id: channel_id.to_string(),
        topic_id,
        mean_before: (nb > 0).then(|| sb / nb as f64),
        mean_after: (na > 0).then(|| sa / na as f64),
        n_before: nb,
        n_after: na,
    }
}

/// Pre/post means for every channel carrying a reference event, ordered by
/// (channel, topic).
pub fn pre_post_table(ds: &CohortDataset, topic_ids: &[u32]) -> Vec<PrePostMeans> {
    let mut out = Vec::new();
    for c in ds.channels() {
        let Some(ev) = &c.reference_event else { continue };
        for &t in topic_ids {
            if let Some(col) = ds.topic_column(t) {
                out.push(pre_post_means(&c.channel_id, ds.uploads_of(&c.channel_id), t, col, ev));
            }
        }
    }
    out
}

/// Aligned series for every (channel, topic) pair, plus the pairs skipped.
#[derive(Debug, Clone, Default)]
pub struct Alignment {
    pub series: Vec<AlignedSeries>,
    pub skipped: Vec<(String, u32, TemporalError)>,
}

impl Alignment {
    pub fn for_topic(&self, topic_id: u32, group: Group) -> Vec<&AlignedSeries> {
        self.series.iter().filter(|s| s.topic_id == topic_id && s.group == group).collect()
    }
}

/// Aligns every channel carrying a reference event on each topic. Output is
/// ordered by (channel, topic).
pub fn align_dataset(ds: &CohortDataset, topic_ids: &[u32], window_weeks: i64) -> Alignment {
    let mut out = Alignment::default();
    for c in ds.channels() {
        let uploads = ds.uploads_of(&c.channel_id);
        for &topic_id in topic_ids {
            let Some(col) = ds.topic_column(topic_id) else { continue };
            let result = match &c.reference_event {
                None => Err(TemporalError::MissingEvent(c.channel_id.clone())),
                Some(ev) => align_channel(&c.channel_id, uploads, topic_id, col, ev, window_weeks)
                    .and_then(|w| resample(&w, c.group)),
            };
            match result {
                Ok(s) => out.series.push(s),
                Err(e) => {
                    log::debug!("skipping {} topic {topic_id}: {e}", c.channel_id);
                    out.skipped.push((c.channel_id.clone(), topic_id, e));
                }
            }
        }
    }
    out
}
