//! Structural invariant checks. Violations are data, never failures.

use serde::{Deserialize, Serialize};

use super::{CohortDataset, EventKind, Group};

/// How far along the pipeline the dataset is expected to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationLevel {
    /// As loaded from disk: synthetic events must not be present yet.
    Load,
    /// Ready for alignment: groups with dated events must carry them.
    PreAlignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    AgeOutOfRange,
    MissingReferenceEvent,
    ReferenceKindMismatch,
    SyntheticEventLoaded,
    EventOutsideUploadSpan,
    NoUploads,
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub channel_id: Option<String>,
    pub message: String,
}

const AGE_RANGE: std::ops::RangeInclusive<u32> = 5..=120;

/// Maximum distance, in days, an event may sit outside the upload span
/// (the 18-month alignment window).
const EVENT_SLACK_DAYS: i64 = 78 * 7;

pub fn validate_dataset(ds: &CohortDataset, level: ValidationLevel) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.channels().is_empty() {
        out.push(Violation { code: ViolationCode::EmptyDataset, channel_id: None, message: "no channels".into() });
    }
    for c in ds.channels() {
        let mut push = |code, message: String| {
            out.push(Violation { code, channel_id: Some(c.channel_id.clone()), message })
        };
        if let Some(age) = c.age {
            if !AGE_RANGE.contains(&age) {
                push(ViolationCode::AgeOutOfRange, format!("age {age} outside [5, 120]"));
            }
        }
        let uploads = ds.uploads_of(&c.channel_id);
        if uploads.is_empty() {
            push(ViolationCode::NoUploads, "channel has no uploads".into());
        }
        match &c.reference_event {
            None => {
                if level == ValidationLevel::PreAlignment && c.group.has_dated_event() {
                    push(ViolationCode::MissingReferenceEvent, format!("{} channel has no event date", c.group));
                }
            }
            Some(ev) => {
                if ev.kind == EventKind::Attempt && !c.group.is_attempted() {
                    push(ViolationCode::ReferenceKindMismatch, format!("attempt event on {} channel", c.group));
                }
                if ev.kind == EventKind::MajorLifeEvent && c.group != Group::ControlMajorLifeEvent {
                    push(ViolationCode::ReferenceKindMismatch, format!("major life event on {} channel", c.group));
                }
                if ev.kind == EventKind::SyntheticMidpoint && level == ValidationLevel::Load {
                    push(ViolationCode::SyntheticEventLoaded, "synthetic midpoints are computed, not loaded".into());
                }
                if ev.kind != EventKind::External {
                    if let (Some(first), Some(last)) = (uploads.first(), uploads.last()) {
                        let before = (first.date() - ev.date).num_days();
                        let after = (ev.date - last.date()).num_days();
                        if before > EVENT_SLACK_DAYS || after > EVENT_SLACK_DAYS {
                            push(
                                ViolationCode::EventOutsideUploadSpan,
                                format!("event {} is far outside uploads {}..{}", ev.date, first.date(), last.date()),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::{ReferenceEvent};
    use super::*;

    fn ds_with(mut f: impl FnMut(&mut super::super::Channel)) -> CohortDataset {
        let (mut c, u) = channel_with_uploads("a", Group::AttemptedDuring, 12, 12);
        c.reference_event = Some(ReferenceEvent::exact(EventKind::Attempt, date(2020, 2, 1)));
        f(&mut c);
        CohortDataset::new(vec![c], u, vec![topic(0)]).unwrap()
    }

    fn codes(v: &[Violation]) -> Vec<ViolationCode> {
        v.iter().map(|v| v.code).collect()
    }

    #[test]
    fn clean_fixture_has_no_violations() {
        assert!(validate_dataset(&ds_with(|_| {}), ValidationLevel::PreAlignment).is_empty());
    }

    #[test]
    fn age_200_is_flagged() {
        let ds = ds_with(|c| c.age = Some(200));
        assert_eq!(codes(&validate_dataset(&ds, ValidationLevel::Load)), vec![ViolationCode::AgeOutOfRange]);
    }

    #[test]
    fn missing_event_only_matters_before_alignment() {
        let ds = ds_with(|c| c.reference_event = None);
        assert!(validate_dataset(&ds, ValidationLevel::Load).is_empty());
        assert_eq!(
            codes(&validate_dataset(&ds, ValidationLevel::PreAlignment)),
            vec![ViolationCode::MissingReferenceEvent]
        );
    }

    #[test]
    fn kind_and_span_checks() {
        let ds = ds_with(|c| c.group = Group::ControlMatches);
        assert_eq!(codes(&validate_dataset(&ds, ValidationLevel::Load)), vec![ViolationCode::ReferenceKindMismatch]);

        let ds = ds_with(|c| c.reference_event = Some(ReferenceEvent::exact(EventKind::Attempt, date(2024, 1, 1))));
        assert_eq!(codes(&validate_dataset(&ds, ValidationLevel::Load)), vec![ViolationCode::EventOutsideUploadSpan]);

        let ds = ds_with(|c| {
            c.reference_event = Some(ReferenceEvent::exact(EventKind::SyntheticMidpoint, date(2020, 2, 1)))
        });
        assert_eq!(codes(&validate_dataset(&ds, ValidationLevel::Load)), vec![ViolationCode::SyntheticEventLoaded]);
        assert!(validate_dataset(&ds, ValidationLevel::PreAlignment).is_empty());
    }
}
