//! Synthetic cohorts with known parameters, used to check the estimators.
//!
//! Randomness comes from ChaCha8 seeded with `SynthSpec::seed`. Every channel
//! draws from its own streams, `(channel index << 20) | (purpose << 16) |
//! topic`, so a channel's data does not depend on how many other channels or
//! topics are generated before it.
//!
//! Demographics: gender female/male/other/unknown with probabilities
//! 0.55/0.35/0.05/0.05; age from N(27 + 8 c, 8) rounded and clamped to
//! [13, 70], where `c` is the confounding strength for treatment channels and
//! 0 otherwise; minority flag Bernoulli(0.3); followers log-normal. Upload
//! gaps are exponential. The age covariate effect applies to `(age - 27) / 8`.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Channel, CohortDataset, EventKind, Gender, Group, ReferenceEvent, TopicMeta, Upload};
use crate::glmm::{GlmmData, GlmmObservation};
use crate::special::logistic;
use crate::temporal::upload_midpoint;

const AGE_CENTER: f64 = 27.0;
const AGE_SCALE: f64 = 8.0;
const Y_FLOOR: f64 = 1e-12;

/// Linear-predictor coefficients for one topic. Group arrays follow
/// [`Group::CONTROLS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicEffects {
    pub beta0: f64,
    pub beta_time: f64,
    pub beta_group: [f64; 3],
    pub beta_group_time: [f64; 3],
    pub beta_age: f64,
    pub beta_male: f64,
}

impl Default for TopicEffects {
    fn default() -> Self {
        TopicEffects {
            beta0: -1.5,
            beta_time: 0.0,
            beta_group: [0.0; 3],
            beta_group_time: [0.0; 3],
            beta_age: 0.0,
            beta_male: 0.0,
        }
    }
}

impl TopicEffects {
    fn group_terms(&self, group: Group) -> (f64, f64) {
        match Group::CONTROLS.iter().position(|&g| g == group) {
            Some(k) => (self.beta_group[k], self.beta_group_time[k]),
            None => (0.0, 0.0),
        }
    }

    /// Linear predictor without covariates or random effect.
    pub fn eta(&self, group: Group, post: bool) -> f64 {
        let (g, gt) = self.group_terms(group);
        let t = post as u8 as f64;
        self.beta0 + self.beta_time * t + g + gt * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Channel counts in [`Group::ALL`] order.
    pub channels_per_group: [usize; 4],
    pub n_topics: usize,
    pub effects: TopicEffects,
    /// Per-topic replacements for `effects`.
    pub topic_effects: BTreeMap<u32, TopicEffects>,
    pub sigma2: f64,
    pub phi: f64,
    pub informative_topics: Vec<u32>,
    /// Pre-event logit shift for treatment channels on informative topics.
    pub selection_effect: f64,
    pub confounding: f64,
    pub mean_gap_days: f64,
    pub pre_weeks: u32,
    pub post_weeks: u32,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            channels_per_group: [20; 4],
            n_topics: 4,
            effects: TopicEffects::default(),
            topic_effects: BTreeMap::new(),
            sigma2: 0.3,
            phi: 20.0,
            informative_topics: vec![],
            selection_effect: 0.0,
            confounding: 0.0,
            mean_gap_days: 7.0,
            pre_weeks: 52,
            post_weeks: 52,
            start_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn effects_for(&self, topic_id: u32) -> &TopicEffects {
        self.topic_effects.get(&topic_id).unwrap_or(&self.effects)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_topics == 0 {
            return Err(SynthError::Invalid("n_topics must be positive".into()));
        }
        if !(self.phi > 0.0) || !(self.sigma2 >= 0.0) || !(self.mean_gap_days > 0.0) {
            return Err(SynthError::Invalid("phi and mean_gap_days must be positive, sigma2 nonnegative".into()));
        }
        let out_of_range = |t: &u32| *t as usize >= self.n_topics;
        if let Some(t) = self.informative_topics.iter().chain(self.topic_effects.keys()).find(|t| out_of_range(t)) {
            return Err(SynthError::Invalid(format!("topic {t} outside 0..{}", self.n_topics)));
        }
        for (k, g) in Group::CONTROLS.iter().enumerate() {
            let absent = self.channels_per_group[g.index()] == 0;
            let effects = std::iter::once(&self.effects).chain(self.topic_effects.values());
            if absent && effects.into_iter().any(|e| e.beta_group[k] != 0.0 || e.beta_group_time[k] != 0.0) {
                return Err(SynthError::Invalid(format!("effect specified for absent group {g}")));
            }
        }
        if self.channels_per_group[Group::AttemptedDuring.index()] == 0 {
            return Err(SynthError::Invalid("treatment group is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

/// Marks `informative_topics` as carrying a pre-event shift of
/// `effect_size` on the logit scale for treatment channels.
pub fn inject_selection_signal(spec: &SynthSpec, informative_topics: &[u32], effect_size: f64) -> SynthSpec {
    SynthSpec { informative_topics: informative_topics.to_vec(), selection_effect: effect_size, ..spec.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// Random intercepts per channel, one per topic.
    pub random_intercepts: BTreeMap<String, Vec<f64>>,
    /// The date separating "before" from "after" when generating each
    /// channel: the loaded event, or the upload midpoint for groups without one.
    pub split_dates: BTreeMap<String, NaiveDate>,
}

#[derive(Clone, Copy)]
enum Purpose {
    Demographics = 0,
    Timeline = 1,
    Intercepts = 2,
    Engagement = 3,
    Topic = 4,
}

fn stream(seed: u64, channel: usize, purpose: Purpose, topic: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((channel as u64) << 20) | ((purpose as u64) << 16) | topic as u64);
    rng
}

fn id_prefix(group: Group) -> &'static str {
    match group {
        Group::AttemptedDuring => "during",
        Group::AttemptedBefore => "before",
        Group::ControlMajorLifeEvent => "life",
        Group::ControlMatches => "match",
    }
}

fn draw_beta(rng: &mut ChaCha8Rng, mu: f64, phi: f64) -> f64 {
    let mu = mu.clamp(1e-9, 1.0 - 1e-9);
    let y: f64 = Beta::new(mu * phi, (1.0 - mu) * phi).expect("positive shapes").sample(rng);
    y.clamp(Y_FLOOR, 1.0 - Y_FLOOR)
}

fn draw_gender(rng: &mut ChaCha8Rng) -> Gender {
    let u: f64 = rng.random();
    match u {
        u if u < 0.55 => Gender::Female,
        u if u < 0.90 => Gender::Male,
        u if u < 0.95 => Gender::Other,
        _ => Gender::Unknown,
    }
}

/// Generates a dataset from `spec` together with the latent quantities.
pub fn generate_cohort(spec: &SynthSpec) -> Result<(CohortDataset, GroundTruth), SynthError> {
    spec.validate()?;
    let topics: Vec<TopicMeta> = (0..spec.n_topics as u32)
        .map(|t| TopicMeta { topic_id: t, label: format!("topic {t}"), expert_flag: false, top_words: vec![] })
        .collect();
    let mut channels = Vec::new();
    let mut uploads = Vec::new();
    let mut truth = GroundTruth { spec: spec.clone(), random_intercepts: BTreeMap::new(), split_dates: BTreeMap::new() };
    let noon = NaiveTime::from_hms_opt(12, 0, 0).expect("valid time");
    let mut index = 0usize;
    for group in Group::ALL {
        for i in 0..spec.channels_per_group[group.index()] {
            let channel_id = format!("{}-{i:04}", id_prefix(group));
            let treated = group == Group::AttemptedDuring;

            let mut rng = stream(spec.seed, index, Purpose::Demographics, 0);
            let gender = draw_gender(&mut rng);
            let age_mean = AGE_CENTER + if treated { spec.confounding * AGE_SCALE } else { 0.0 };
            let age_draw: f64 = Normal::new(age_mean, AGE_SCALE).expect("finite").sample(&mut rng);
            let age = age_draw.round().clamp(13.0, 70.0) as u32;
            let minority = rng.random_bool(0.3);
            let followers: f64 = LogNormal::new(5000f64.ln(), 1.0).expect("finite").sample(&mut rng);

            let mut rng = stream(spec.seed, index, Purpose::Timeline, 0);
            let event = spec.start_date + Duration::days(7 * spec.pre_weeks as i64 + rng.random_range(0..365));
            let from = (event - Duration::days(7 * spec.pre_weeks as i64)).and_time(noon);
            let to = (event + Duration::days(7 * spec.post_weeks as i64)).and_time(noon);
            let gaps = Exp::new(1.0 / spec.mean_gap_days).expect("positive rate");
            let mut times = Vec::new();
            let mut t = from + Duration::seconds((gaps.sample(&mut rng) * 86400.0) as i64);
            while t < to {
                times.push(t.and_utc());
                t += Duration::seconds((gaps.sample(&mut rng) * 86400.0).max(60.0) as i64);
            }

            let reference_event = match group {
                Group::AttemptedDuring => Some(ReferenceEvent::exact(EventKind::Attempt, event)),
                Group::ControlMajorLifeEvent => Some(ReferenceEvent::exact(EventKind::MajorLifeEvent, event)),
                _ => None,
            };
            let mut channel_uploads: Vec<Upload> = times
                .iter()
                .enumerate()
                .map(|(k, &timestamp)| Upload {
                    upload_id: format!("{channel_id}-u{k:04}"),
                    channel_id: channel_id.clone(),
                    timestamp,
                    duration_s: 0.0,
                    views: None,
                    likes: None,
                    comments: None,
                    valid: true,
                    narrative_flag: false,
                    topic_probabilities: vec![0.0; spec.n_topics],
                })
                .collect();
            let split = match reference_event {
                Some(ev) => ev.date,
                None => upload_midpoint(&channel_uploads).unwrap_or(event),
            };

            let mut rng = stream(spec.seed, index, Purpose::Engagement, 0);
            let duration = LogNormal::new(600f64.ln(), 0.5).expect("finite");
            let views = LogNormal::new((followers * 0.2).max(1.0).ln(), 0.8).expect("finite");
            for u in channel_uploads.iter_mut() {
                u.duration_s = duration.sample(&mut rng).round();
                let v: f64 = views.sample(&mut rng);
                u.views = Some(v.round() as u64);
                u.likes = Some((v * rng.random_range(0.01..0.08)).round() as u64);
                u.comments = Some((v * rng.random_range(0.001..0.01)).round() as u64);
            }

            let mut rng = stream(spec.seed, index, Purpose::Intercepts, 0);
            let normal = Normal::new(0.0, spec.sigma2.sqrt()).expect("finite");
            let intercepts: Vec<f64> = (0..spec.n_topics).map(|_| normal.sample(&mut rng)).collect();

            let age_z = (age as f64 - AGE_CENTER) / AGE_SCALE;
            let male = (gender == Gender::Male) as u8 as f64;
            for topic in 0..spec.n_topics as u32 {
                let eff = spec.effects_for(topic);
                let informative = treated && spec.informative_topics.contains(&topic);
                let base = eff.beta_age * age_z + eff.beta_male * male + intercepts[topic as usize];
                let mut rng = stream(spec.seed, index, Purpose::Topic, topic);
                for u in channel_uploads.iter_mut() {
                    let post = u.date() > split;
                    let shift = if informative && !post { spec.selection_effect } else { 0.0 };
                    let mu = logistic(eff.eta(group, post) + base + shift);
                    u.topic_probabilities[topic as usize] = draw_beta(&mut rng, mu, spec.phi);
                }
            }

            channels.push(Channel {
                channel_id: channel_id.clone(),
                group,
                gender,
                age: Some(age),
                minority_flag: Some(minority),
                follower_count: Some(followers.round() as u64),
                reference_event,
                excluded_flag: false,
            });
            uploads.extend(channel_uploads);
            truth.random_intercepts.insert(channel_id.clone(), intercepts);
            truth.split_dates.insert(channel_id, split);
            index += 1;
        }
    }
    let ds = CohortDataset::new(channels, uploads, topics).map_err(|e| SynthError::Invalid(e.to_string()))?;
    Ok((ds, truth))
}

/// Draws the GLMM response directly: one Beta observation per channel and
/// period from the model with random intercepts. Covariates are omitted.
pub fn simulate_glmm_panel(
    effects: &TopicEffects,
    channels_per_group: [usize; 4],
    sigma2: f64,
    phi: f64,
    seed: u64,
) -> GlmmData {
    let mut obs = Vec::new();
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("finite");
    let mut index = 0;
    for group in Group::ALL {
        for i in 0..channels_per_group[group.index()] {
            let mut rng = stream(seed, index, Purpose::Topic, 0);
            let u = normal.sample(&mut rng);
            let channel_id = format!("{}-{i:04}", id_prefix(group));
            for time in 0..2u8 {
                let mu = logistic(effects.eta(group, time == 1) + u);
                obs.push(GlmmObservation {
                    channel_id: channel_id.clone(),
                    y: draw_beta(&mut rng, mu, phi),
                    time,
                    group,
                    covariates: vec![],
                });
            }
            index += 1;
        }
    }
    GlmmData::from_observations(0, obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{digamma, logit};

    fn small() -> SynthSpec {
        SynthSpec { channels_per_group: [3, 2, 2, 3], n_topics: 3, seed: 42, ..SynthSpec::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        let (a, ta) = generate_cohort(&small()).unwrap();
        let (b, tb) = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_cohort(&SynthSpec { seed: 43, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn structure_and_ranges() {
        let (ds, truth) = generate_cohort(&small()).unwrap();
        assert_eq!(ds.channels().len(), 10);
        assert_eq!(ds.topics().len(), 3);
        for u in ds.uploads() {
            assert!(u.topic_probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        for c in ds.channels() {
            assert_eq!(c.reference_event.is_some(), c.group.has_dated_event());
            let n = ds.uploads_of(&c.channel_id).len();
            // two years at one upload a week on average
            assert!((60..160).contains(&n), "{} uploads", n);
            assert!(truth.split_dates.contains_key(&c.channel_id));
        }
    }

    #[test]
    fn channel_streams_are_independent_of_later_channels() {
        let (a, _) = generate_cohort(&small()).unwrap();
        let (b, _) = generate_cohort(&SynthSpec { channels_per_group: [3, 2, 2, 9], ..small() }).unwrap();
        assert_eq!(a.uploads_of("during-0001"), b.uploads_of("during-0001"));
    }

    #[test]
    fn spec_errors() {
        assert!(generate_cohort(&SynthSpec { informative_topics: vec![7], ..small() }).is_err());
        let mut bad = small();
        bad.channels_per_group = [3, 0, 2, 3];
        bad.effects.beta_group[0] = 0.4;
        assert!(generate_cohort(&bad).is_err());
        assert!(generate_cohort(&SynthSpec { phi: 0.0, ..small() }).is_err());
    }

    #[test]
    fn logit_means_approach_linear_predictor() {
        let eff = TopicEffects { beta0: -0.4, beta_time: 0.55, ..TopicEffects::default() };
        let data = simulate_glmm_panel(&eff, [2000, 0, 0, 0], 0.0, 200.0, 3);
        for t in 0..2u8 {
            let ys: Vec<f64> = data.observations.iter().filter(|o| o.time == t).map(|o| logit(o.y)).collect();
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let target = eff.eta(Group::AttemptedDuring, t == 1);
            assert!((m - target).abs() < 0.02, "time {t}: {m} vs {target}");
            // E[logit y] = digamma(a) - digamma(b) is the exact limit
            let mu = logistic(target);
            let exact = digamma(mu * 200.0) - digamma((1.0 - mu) * 200.0);
            assert!((m - exact).abs() < 0.01);
        }
    }

    #[test]
    fn selection_signal_shifts_pre_event_only() {
        let spec = inject_selection_signal(
            &SynthSpec { channels_per_group: [30, 0, 0, 30], n_topics: 2, sigma2: 0.0, seed: 5, ..SynthSpec::default() },
            &[1],
            1.0,
        );
        let (ds, truth) = generate_cohort(&spec).unwrap();
        let mean = |group: Group, topic: usize, post: bool| {
            let vals: Vec<f64> = ds
                .channels_in(group)
                .flat_map(|c| {
                    let split = truth.split_dates[&c.channel_id];
                    ds.uploads_of(&c.channel_id)
                        .iter()
                        .filter(move |u| (u.date() > split) == post)
                        .map(move |u| u.topic_probabilities[topic])
                })
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let pre_gap = mean(Group::AttemptedDuring, 1, false) - mean(Group::ControlMatches, 1, false);
        let post_gap = mean(Group::AttemptedDuring, 1, true) - mean(Group::ControlMatches, 1, true);
        assert!(pre_gap > 0.12, "{pre_gap}");
        assert!(post_gap.abs() < 0.03, "{post_gap}");
        let null_gap = mean(Group::AttemptedDuring, 0, false) - mean(Group::ControlMatches, 0, false);
        assert!(null_gap.abs() < 0.03);
    }
}
