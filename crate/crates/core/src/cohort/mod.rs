//! Cohort data model: channels, uploads, topic metadata and the immutable
//! [`CohortDataset`] that ties them together.
//!
//! Per-upload topic vectors are taken as given. Upstream segmentation produces
//! soft cluster memberships per transcript chunk; the per-video vector this
//! crate ingests is the arithmetic mean of those chunk vectors. Values are
//! memberships in `[0, 1]` and need not sum to one.

mod config;
mod io;
mod validate;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DatasetConfig, YearPartAnchors};
pub use io::{load_dataset, write_dataset, DatasetPaths, LoadError};
pub use validate::{validate_dataset, ValidationLevel, Violation, ViolationCode};

/// Study arm of a channel. `AttemptedDuring` is the treatment and the
/// reference category for every contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    AttemptedDuring,
    AttemptedBefore,
    ControlMajorLifeEvent,
    ControlMatches,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::AttemptedDuring,
        Group::AttemptedBefore,
        Group::ControlMajorLifeEvent,
        Group::ControlMatches,
    ];

    /// The three comparison arms, in canonical order.
    pub const CONTROLS: [Group; 3] = [
        Group::AttemptedBefore,
        Group::ControlMajorLifeEvent,
        Group::ControlMatches,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::AttemptedDuring => "attempted_during",
            Group::AttemptedBefore => "attempted_before",
            Group::ControlMajorLifeEvent => "control_major_life_event",
            Group::ControlMatches => "control_matches",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Groups whose reference event is a real, dated occurrence.
    pub fn has_dated_event(self) -> bool {
        matches!(self, Group::AttemptedDuring | Group::ControlMajorLifeEvent)
    }

    pub fn is_attempted(self) -> bool {
        matches!(self, Group::AttemptedDuring | Group::AttemptedBefore)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unrecognised {what} value `{value}`")]
pub struct ParseEnumError {
    pub what: &'static str,
    pub value: String,
}

impl FromStr for Group {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s.trim())
            .ok_or_else(|| ParseEnumError { what: "group", value: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Other,
    #[default]
    Unknown,
}

impl Gender {
    pub const ALL: [Gender; 4] = [Gender::Female, Gender::Male, Gender::Other, Gender::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Other => "other",
            Gender::Unknown => "unknown",
        }
    }
}

impl FromStr for Gender {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Gender::Unknown);
        }
        Gender::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| ParseEnumError { what: "gender", value: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Attempt,
    MajorLifeEvent,
    SyntheticMidpoint,
    External,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Attempt => "attempt",
            EventKind::MajorLifeEvent => "major_life_event",
            EventKind::SyntheticMidpoint => "synthetic_midpoint",
            EventKind::External => "external",
        }
    }
}

impl FromStr for EventKind {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "attempt" => Ok(EventKind::Attempt),
            "major_life_event" => Ok(EventKind::MajorLifeEvent),
            "synthetic_midpoint" => Ok(EventKind::SyntheticMidpoint),
            "external" => Ok(EventKind::External),
            other => Err(ParseEnumError { what: "event kind", value: other.to_string() }),
        }
    }
}

/// How precisely the event date was known when it was annotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatePrecision {
    Exact,
    Month,
    YearPart,
}

impl DatePrecision {
    pub fn as_str(self) -> &'static str {
        match self {
            DatePrecision::Exact => "exact",
            DatePrecision::Month => "month",
            DatePrecision::YearPart => "year_part",
        }
    }
}

impl FromStr for DatePrecision {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "" | "exact" => Ok(DatePrecision::Exact),
            "month" => Ok(DatePrecision::Month),
            "year_part" => Ok(DatePrecision::YearPart),
            other => Err(ParseEnumError { what: "date precision", value: other.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEvent {
    pub kind: EventKind,
    pub date: NaiveDate,
    pub precision: DatePrecision,
}

impl ReferenceEvent {
    pub fn exact(kind: EventKind, date: NaiveDate) -> Self {
        ReferenceEvent { kind, date, precision: DatePrecision::Exact }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub channel_id: String,
    pub group: Group,
    pub gender: Gender,
    pub age: Option<u32>,
    pub minority_flag: Option<bool>,
    pub follower_count: Option<u64>,
    pub reference_event: Option<ReferenceEvent>,
    pub excluded_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub upload_id: String,
    pub channel_id: String,
    pub timestamp: DateTime<Utc>,
    pub duration_s: f64,
    pub views: Option<u64>,
    pub likes: Option<u64>,
    pub comments: Option<u64>,
    pub valid: bool,
    pub narrative_flag: bool,
    /// Dense topic vector aligned with [`CohortDataset::topics`].
    pub topic_probabilities: Vec<f64>,
}

impl Upload {
    pub fn date(&self) -> NaiveDate {
        self.timestamp.date_naive()
    }

    /// Valid and not the event narrative: eligible for any statistic.
    pub fn is_analyzable(&self) -> bool {
        self.valid && !self.narrative_flag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicMeta {
    pub topic_id: u32,
    pub label: String,
    pub expert_flag: bool,
    #[serde(default)]
    pub top_words: Vec<(String, f64)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("duplicate channel id `{0}`")]
    DuplicateChannel(String),
    #[error("duplicate upload id `{0}`")]
    DuplicateUpload(String),
    #[error("duplicate topic id {0}")]
    DuplicateTopic(u32),
    #[error("upload `{upload_id}` references unknown channel `{channel_id}`")]
    DanglingChannel { upload_id: String, channel_id: String },
    #[error("upload `{upload_id}` carries {got} topic values, expected {expected}")]
    TopicWidth { upload_id: String, got: usize, expected: usize },
    #[error("upload `{upload_id}` topic {topic_id}: probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { upload_id: String, topic_id: u32, value: f64 },
    #[error("min_valid must be at least 1")]
    DegenerateThreshold,
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
}

/// Immutable, cross-linked container of channels, uploads and topics.
///
/// Channels are kept sorted by id, uploads by (channel, timestamp, id), and
/// topics by id, which makes every iteration order canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    channels: Vec<Channel>,
    uploads: Vec<Upload>,
    topics: Vec<TopicMeta>,
    channel_index: HashMap<String, usize>,
    upload_ranges: Vec<std::ops::Range<usize>>,
    topic_index: HashMap<u32, usize>,
}

impl CohortDataset {
    pub fn new(
        mut channels: Vec<Channel>,
        mut uploads: Vec<Upload>,
        mut topics: Vec<TopicMeta>,
    ) -> Result<Self, DatasetError> {
        channels.sort_by(|a, b| a.channel_id.cmp(&b.channel_id));
        for w in channels.windows(2) {
            if w[0].channel_id == w[1].channel_id {
                return Err(DatasetError::DuplicateChannel(w[0].channel_id.clone()));
            }
        }
        topics.sort_by_key(|t| t.topic_id);
        for w in topics.windows(2) {
            if w[0].topic_id == w[1].topic_id {
                return Err(DatasetError::DuplicateTopic(w[0].topic_id));
            }
        }
        let channel_index: HashMap<String, usize> = channels
            .iter()
            .enumerate()
            .map(|(i, c)| (c.channel_id.clone(), i))
            .collect();
        let topic_index: HashMap<u32, usize> =
            topics.iter().enumerate().map(|(i, t)| (t.topic_id, i)).collect();

        let mut seen = BTreeSet::new();
        for u in &uploads {
            if !seen.insert(u.upload_id.as_str()) {
                return Err(DatasetError::DuplicateUpload(u.upload_id.clone()));
            }
            if !channel_index.contains_key(&u.channel_id) {
                return Err(DatasetError::DanglingChannel {
                    upload_id: u.upload_id.clone(),
                    channel_id: u.channel_id.clone(),
                });
            }
            if u.topic_probabilities.len() != topics.len() {
                return Err(DatasetError::TopicWidth {
                    upload_id: u.upload_id.clone(),
                    got: u.topic_probabilities.len(),
                    expected: topics.len(),
                });
            }
            for (col, &p) in u.topic_probabilities.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(DatasetError::ProbabilityOutOfRange {
                        upload_id: u.upload_id.clone(),
                        topic_id: topics[col].topic_id,
                        value: p,
                    });
                }
            }
        }
        drop(seen);

        uploads.sort_by(|a, b| {
            channel_index[&a.channel_id]
                .cmp(&channel_index[&b.channel_id])
                .then(a.timestamp.cmp(&b.timestamp))
                .then(a.upload_id.cmp(&b.upload_id))
        });
        let mut upload_ranges = vec![0..0; channels.len()];
        let mut start = 0;
        while start < uploads.len() {
            let ci = channel_index[&uploads[start].channel_id];
            let mut end = start;
            while end < uploads.len() && uploads[end].channel_id == uploads[start].channel_id {
                end += 1;
            }
            upload_ranges[ci] = start..end;
            start = end;
        }

        Ok(CohortDataset { channels, uploads, topics, channel_index, upload_ranges, topic_index })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn uploads(&self) -> &[Upload] {
        &self.uploads
    }

    pub fn topics(&self) -> &[TopicMeta] {
        &self.topics
    }

    pub fn channel(&self, channel_id: &str) -> Option<&Channel> {
        self.channel_index.get(channel_id).map(|&i| &self.channels[i])
    }

    /// Uploads of one channel, ordered by timestamp.
    pub fn uploads_of(&self, channel_id: &str) -> &[Upload] {
        match self.channel_index.get(channel_id) {
            Some(&i) => &self.uploads[self.upload_ranges[i].clone()],
            None => &[],
        }
    }

    /// Column of `topic_id` inside each upload's topic vector.
    pub fn topic_column(&self, topic_id: u32) -> Option<usize> {
        self.topic_index.get(&topic_id).copied()
    }

    pub fn topic_ids(&self) -> Vec<u32> {
        self.topics.iter().map(|t| t.topic_id).collect()
    }

    pub fn channels_in(&self, group: Group) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(move |c| c.group == group)
    }

    pub fn valid_upload_count(&self, channel_id: &str) -> usize {
        self.uploads_of(channel_id).iter().filter(|u| u.valid).count()
    }

    /// Copy of the dataset restricted to `keep`.
    pub fn retain_channels<F: Fn(&Channel) -> bool>(&self, keep: F) -> CohortDataset {
        let channels: Vec<Channel> = self.channels.iter().filter(|c| keep(c)).cloned().collect();
        let kept: BTreeSet<&str> = channels.iter().map(|c| c.channel_id.as_str()).collect();
        let uploads: Vec<Upload> = self
            .uploads
            .iter()
            .filter(|u| kept.contains(u.channel_id.as_str()))
            .cloned()
            .collect();
        CohortDataset::new(channels, uploads, self.topics.clone())
            .expect("subset of a consistent dataset is consistent")
    }

    /// Copy with per-channel reference events replaced.
    pub fn with_reference_events(&self, events: &HashMap<String, ReferenceEvent>) -> CohortDataset {
        let mut out = self.clone();
        for c in &mut out.channels {
            if let Some(ev) = events.get(&c.channel_id) {
                c.reference_event = Some(*ev);
            }
        }
        out
    }

    /// Copy with upload validity flags replaced where `flags` has an entry.
    pub fn with_validity(&self, flags: &HashMap<String, bool>) -> CohortDataset {
        let mut out = self.clone();
        for u in &mut out.uploads {
            if let Some(&v) = flags.get(&u.upload_id) {
                u.valid = v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub channel_id: String,
    pub group: Group,
    pub reason: String,
    pub valid_uploads: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub min_valid: usize,
    pub exclusions: Vec<Exclusion>,
    pub retained: usize,
}

pub const REASON_INSUFFICIENT_VALID: &str = "insufficient_valid_uploads";

/// Drops channels with fewer than `min_valid` valid uploads. The input is
/// left untouched.
pub fn filter_channels(
    ds: &CohortDataset,
    min_valid: usize,
) -> Result<(CohortDataset, ExclusionReport), DatasetError> {
    if min_valid == 0 {
        return Err(DatasetError::DegenerateThreshold);
    }
    let mut exclusions = Vec::new();
    for c in ds.channels() {
        let n = ds.valid_upload_count(&c.channel_id);
        if n < min_valid {
            exclusions.push(Exclusion {
                channel_id: c.channel_id.clone(),
                group: c.group,
                reason: REASON_INSUFFICIENT_VALID.to_string(),
                valid_uploads: n,
            });
        }
    }
    let dropped: BTreeSet<&str> = exclusions.iter().map(|e| e.channel_id.as_str()).collect();
    let filtered = ds.retain_channels(|c| !dropped.contains(c.channel_id.as_str()));
    let report = ExclusionReport { min_valid, retained: filtered.channels().len(), exclusions };
    Ok((filtered, report))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use chrono::TimeZone;

    pub fn channel(id: &str, group: Group) -> Channel {
        Channel {
            channel_id: id.to_string(),
            group,
            gender: Gender::Female,
            age: Some(25),
            minority_flag: Some(false),
            follower_count: Some(1000),
            reference_event: None,
            excluded_flag: false,
        }
    }

    pub fn upload(id: &str, channel: &str, day: NaiveDate, probs: Vec<f64>) -> Upload {
        Upload {
            upload_id: id.to_string(),
            channel_id: channel.to_string(),
            timestamp: Utc.from_utc_datetime(&day.and_hms_opt(12, 0, 0).unwrap()),
            duration_s: 300.0,
            views: Some(100),
            likes: Some(10),
            comments: Some(1),
            valid: true,
            narrative_flag: false,
            topic_probabilities: probs,
        }
    }

    pub fn topic(id: u32) -> TopicMeta {
        TopicMeta { topic_id: id, label: format!("topic {id}"), expert_flag: id == 0, top_words: vec![] }
    }

    pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    /// Channel `id` with `n` weekly uploads starting 2020-01-01, `valid_n` of them valid.
    pub fn channel_with_uploads(id: &str, group: Group, n: usize, valid_n: usize) -> (Channel, Vec<Upload>) {
        let c = channel(id, group);
        let start = date(2020, 1, 1);
        let ups = (0..n)
            .map(|i| {
                let mut u = upload(
                    &format!("{id}_u{i:03}"),
                    id,
                    start + chrono::Duration::days(7 * i as i64),
                    vec![0.1],
                );
                u.valid = i < valid_n;
                u
            })
            .collect();
        (c, ups)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn dataset(spec: &[(&str, usize)]) -> CohortDataset {
        let mut chans = vec![];
        let mut ups = vec![];
        for (id, valid) in spec {
            let (c, u) = channel_with_uploads(id, Group::ControlMatches, 12, *valid);
            chans.push(c);
            ups.extend(u);
        }
        CohortDataset::new(chans, ups, vec![topic(0)]).unwrap()
    }

    #[test]
    fn nine_valid_uploads_is_excluded_ten_retained() {
        let ds = dataset(&[("a", 9), ("b", 10), ("c", 12)]);
        let (kept, report) = filter_channels(&ds, 10).unwrap();
        assert_eq!(kept.channels().len(), 2);
        assert_eq!(report.exclusions.len(), 1);
        assert_eq!(report.exclusions[0].channel_id, "a");
        assert_eq!(report.exclusions[0].reason, "insufficient_valid_uploads");
        assert_eq!(report.exclusions[0].valid_uploads, 9);
        assert!(kept.channel("b").is_some());
        // original untouched
        assert_eq!(ds.channels().len(), 3);
    }

    #[test]
    fn min_valid_one_keeps_channels_with_any_valid_upload() {
        let ds = dataset(&[("a", 0), ("b", 1), ("c", 5)]);
        let (kept, report) = filter_channels(&ds, 1).unwrap();
        assert_eq!(kept.channels().len(), 2);
        assert_eq!(report.exclusions.len() + kept.channels().len(), 3);
    }

    #[test]
    fn zero_threshold_is_rejected() {
        let ds = dataset(&[("a", 3)]);
        assert_eq!(filter_channels(&ds, 0).unwrap_err(), DatasetError::DegenerateThreshold);
    }

    #[test]
    fn filter_is_idempotent() {
        let ds = dataset(&[("a", 4), ("b", 10), ("c", 11), ("d", 2)]);
        let (once, _) = filter_channels(&ds, 10).unwrap();
        let (twice, report) = filter_channels(&once, 10).unwrap();
        assert_eq!(once, twice);
        assert!(report.exclusions.is_empty());
    }

    #[test]
    fn construction_rejects_dangling_and_duplicates() {
        let (c, mut u) = channel_with_uploads("a", Group::ControlMatches, 2, 2);
        u[1].channel_id = "x9".into();
        let err = CohortDataset::new(vec![c.clone()], u, vec![topic(0)]).unwrap_err();
        assert!(matches!(err, DatasetError::DanglingChannel { ref channel_id, .. } if channel_id == "x9"));

        let err = CohortDataset::new(vec![c.clone(), c], vec![], vec![topic(0)]).unwrap_err();
        assert_eq!(err, DatasetError::DuplicateChannel("a".into()));
    }

    #[test]
    fn uploads_are_grouped_by_channel_in_time_order() {
        let (c1, mut u1) = channel_with_uploads("b", Group::ControlMatches, 3, 3);
        let (c2, u2) = channel_with_uploads("a", Group::AttemptedDuring, 2, 2);
        u1.reverse();
        let ds = CohortDataset::new(vec![c1, c2], [u1, u2].concat(), vec![topic(0)]).unwrap();
        assert_eq!(ds.channels()[0].channel_id, "a");
        let ups = ds.uploads_of("b");
        assert_eq!(ups.len(), 3);
        assert!(ups.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert_eq!(ds.uploads_of("missing").len(), 0);
    }
}
