use std::collections::{BTreeSet, HashMap};

use cohortlens::cohort::{CohortDataset, EventKind, Group, ReferenceEvent};
use cohortlens::glmm::GlmmSpec;
use cohortlens::robustness::{
    engagement_comparison, external_event_analysis, sensitivity_refit, EngagementMetric, SensitivityOptions,
};
use cohortlens::stats::between_battery;
use cohortlens::synth::{generate_cohort, SynthSpec, TopicEffects};
use cohortlens::temporal::{align_dataset, assign_reference_events, EventPolicy};

fn cohort(seed: u64, effects: TopicEffects) -> CohortDataset {
    let spec = SynthSpec { channels_per_group: [20; 4], n_topics: 2, effects, seed, ..SynthSpec::default() };
    let (ds, _) = generate_cohort(&spec).unwrap();
    assign_reference_events(&ds, EventPolicy::Standard).0
}

fn scale_likes(ds: &CohortDataset, group: Group, factor: u64) -> CohortDataset {
    let scaled: BTreeSet<&str> = ds.channels_in(group).map(|c| c.channel_id.as_str()).collect();
    let uploads = ds
        .uploads()
        .iter()
        .cloned()
        .map(|mut u| {
            if scaled.contains(u.channel_id.as_str()) {
                u.likes = u.likes.map(|l| l * factor);
            }
            u
        })
        .collect();
    CohortDataset::new(ds.channels().to_vec(), uploads, ds.topics().to_vec()).unwrap()
}

#[test]
fn likes_scaled_tenfold_are_detected_for_that_group_only() {
    let base = cohort(3, TopicEffects::default());
    let scaled = scale_likes(&base, Group::ControlMatches, 10);
    let likes = |ds: &CohortDataset| {
        let report = engagement_comparison(ds, 0.05);
        report.metrics.into_iter().find(|m| m.metric == EngagementMetric::Likes).unwrap().tests
    };
    let (before, after) = (likes(&base), likes(&scaled));
    assert_eq!(after.len(), 6);
    for (b, a) in before.iter().zip(&after) {
        let involved = a.group_a == Group::ControlMatches || a.group_b == Group::ControlMatches;
        let (pb, pa) = (b.result.as_ref().unwrap().p_value, a.result.as_ref().unwrap().p_value);
        if involved {
            assert!(a.rejected, "{} vs {}", a.group_a, a.group_b);
        } else {
            assert_eq!(pa, pb, "{} vs {}", a.group_a, a.group_b);
        }
    }
}

#[test]
fn empty_exclusion_changes_nothing() {
    let ds = cohort(5, TopicEffects { beta_time: 0.6, ..TopicEffects::default() });
    let opts = SensitivityOptions {
        topic_ids: vec![0, 1],
        glmm: Some(GlmmSpec::default()),
        temporal: true,
        window_weeks: 78,
        q: 0.05,
    };
    let r = sensitivity_refit(&ds, &BTreeSet::new(), &opts).unwrap();
    assert_eq!(r.significance_flips, 0);
    assert_eq!(r.sign_agreement, Some(1.0));
    assert!(r.coefficients.iter().all(|c| c.baseline == c.refit));
    assert!(!r.temporal.is_empty());
}

#[test]
fn excluding_null_channels_keeps_true_effect_signs() {
    let effects = TopicEffects { beta_time: 0.8, beta_group_time: [-0.7; 3], ..TopicEffects::default() };
    let ds = cohort(8, effects);
    let excluded: BTreeSet<String> = ds.channels_in(Group::ControlMatches).take(5).map(|c| c.channel_id.clone()).collect();
    let opts = SensitivityOptions {
        topic_ids: vec![0],
        glmm: Some(GlmmSpec::default()),
        temporal: false,
        window_weeks: 78,
        q: 0.05,
    };
    let r = sensitivity_refit(&ds, &excluded, &opts).unwrap();
    let effect_terms: Vec<_> =
        r.coefficients.iter().filter(|c| c.term == "time" || c.term.starts_with("time:group")).collect();
    assert_eq!(effect_terms.len(), 4);
    assert!(effect_terms.iter().all(|c| c.sign_agrees));

    let whole_group: BTreeSet<String> = ds.channels_in(Group::AttemptedBefore).map(|c| c.channel_id.clone()).collect();
    assert!(sensitivity_refit(&ds, &whole_group, &opts).is_err());
}

#[test]
fn realigning_to_the_existing_event_date_is_the_identity() {
    let ds = cohort(11, TopicEffects { beta_time: 0.5, ..TopicEffects::default() });
    let date = chrono::NaiveDate::from_ymd_opt(2019, 6, 1).unwrap();
    let events: HashMap<String, ReferenceEvent> = ds
        .channels()
        .iter()
        .map(|c| {
            let kind = match c.group {
                Group::AttemptedDuring | Group::AttemptedBefore => EventKind::Attempt,
                Group::ControlMajorLifeEvent => EventKind::MajorLifeEvent,
                Group::ControlMatches => EventKind::SyntheticMidpoint,
            };
            (c.channel_id.clone(), ReferenceEvent::exact(kind, date))
        })
        .collect();
    let anchored = ds.with_reference_events(&events);
    let report = external_event_analysis(&anchored, date, &[0, 1], 78, 0.05).unwrap();
    let direct = between_battery(&align_dataset(&anchored, &[0, 1], 78), &[0, 1], 0.05);
    assert_eq!(report.realigned, direct);
    assert_eq!(report.realigned_rejections, report.anchored_rejections);

    let far = chrono::NaiveDate::from_ymd_opt(2030, 1, 1).unwrap();
    assert!(external_event_analysis(&anchored, far, &[0], 78, 0.05).is_err());
}
